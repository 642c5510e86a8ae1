import pytest

from aide.core import KNOWN, BoundingBox, Category, Detection, LabelSpace
from aide.errors import AdapterUnavailable
from aide.finder import (
    DECISION_IGNORED,
    DECISION_NOVEL,
    IssueReport,
    extract_mentions,
    find_novel,
    finder_precision,
    issue_scan,
    load_issue_report,
    save_issue_report,
)
from aide.worldsim import (
    SimCaptioner,
    SimDetector,
    SimWorldConfig,
    generate_world,
    initial_label_space,
    new_detector_state,
    pretrain_detector,
)


class TestExtractMentions:
    def test_basic_extraction(self):
        vocab = ["motorcyclist", "car", "traffic cone"]
        got = extract_mentions("a motorcyclist riding past a parked car", vocab)
        assert got == {"motorcyclist", "car"}

    def test_no_mentions(self):
        assert extract_mentions("empty street", ["car"]) == set()

    def test_longest_match_shadows_shorter(self):
        got = extract_mentions("two traffic cones on the road", ["traffic cone", "cone"])
        assert got == {"traffic cone"}

    def test_alias_resolves_to_canonical(self):
        got = extract_mentions("a cyclist on the path", ["bicyclist"], {"cyclist": "bicyclist"})
        assert got == {"bicyclist"}

    def test_plural_and_case_handled(self):
        got = extract_mentions("Two Traffic Cones!", ["traffic cone"])
        assert got == {"traffic cone"}


def space_with(*names, synonyms=None):
    cats = tuple(Category(i, n, KNOWN) for i, n in enumerate(names))
    return LabelSpace(categories=cats, synonyms=synonyms or {})


class TestFindNovel:
    def test_difference(self):
        ls = space_with("car")
        got = find_novel({"motorcyclist", "car"}, ls, {"car"})
        assert got == {"motorcyclist"}

    def test_subset_of_label_space(self):
        ls = space_with("car", "truck")
        assert find_novel({"car", "truck"}, ls, set()) == set()

    def test_alias_covers_mention(self):
        ls = space_with("bicyclist", synonyms={"bicyclist": frozenset({"cyclist"})})
        assert find_novel({"cyclist"}, ls, set()) == set()

    def test_predicted_categories_excluded(self):
        ls = space_with("car")
        assert find_novel({"trailer"}, ls, {"trailer"}) == set()


class StubCaptioner:
    def __init__(self, captions):
        self.captions = captions

    def describe(self, image_id):
        return self.captions[image_id]


class StubDetector:
    def __init__(self, outputs=None):
        self.outputs = outputs or {}

    def detect(self, image_id):
        return self.outputs.get(image_id, [])


class FailingCaptioner:
    def describe(self, image_id):
        raise AdapterUnavailable("captioner offline")


class TestIssueScan:
    def _scan(self, captions, trigger=3, vocab=("car", "trailer")):
        ls = space_with("car")
        return issue_scan(
            list(captions.keys()),
            StubCaptioner(captions),
            StubDetector(),
            ls,
            list(vocab),
            trigger_min_mentions=trigger,
        )

    def test_trigger_reached_reports_novel(self):
        captions = {f"i{k}": "a trailer on the road" for k in range(5)}
        report = self._scan(captions)
        assert len(report.candidates) == 1
        cand = report.candidates[0]
        assert cand.name == "trailer"
        assert cand.decision == DECISION_NOVEL
        assert cand.mention_count == 5
        assert set(cand.supporting_images) == set(captions)

    def test_no_out_of_space_mentions(self):
        captions = {"i0": "a car", "i1": "two cars"}
        report = self._scan(captions)
        assert report.candidates == ()

    def test_below_trigger_is_ignored(self):
        captions = {"i0": "a trailer", "i1": "a trailer", "i2": "a car"}
        report = self._scan(captions)
        assert report.candidates[0].decision == DECISION_IGNORED
        assert report.candidates[0].mention_count == 2

    def test_adapter_failure_propagates(self):
        ls = space_with("car")
        with pytest.raises(AdapterUnavailable):
            issue_scan(["i0"], FailingCaptioner(), StubDetector(), ls, ["car"])

    def test_empty_batch_rejected(self):
        ls = space_with("car")
        with pytest.raises(ValueError):
            issue_scan([], StubCaptioner({}), StubDetector(), ls, ["car"])

    def test_predicted_novel_marked_detectable_not_novel(self):
        # the detector already emits boxes whose name matches the mention:
        # not an issue, recorded as already detectable
        ls = space_with("car")
        captions = {"i0": "a trailer", "i1": "a trailer", "i2": "a trailer"}
        det = Detection(BoundingBox(0, 0, 5, 5), 0, 0.9)  # predicts "car"
        report = issue_scan(
            list(captions),
            StubCaptioner(captions),
            StubDetector({k: [det] for k in captions}),
            ls,
            ["car", "trailer"],
        )
        assert report.candidates[0].name == "trailer"
        assert report.candidates[0].decision == DECISION_NOVEL

    def test_report_round_trip(self, tmp_path):
        captions = {f"i{k}": "a trailer" for k in range(4)}
        report = self._scan(captions)
        save_issue_report(report, tmp_path / "issues.json")
        assert load_issue_report(tmp_path / "issues.json") == report


class TestFinderPrecision:
    def _candidate(self, n):
        from aide.finder import IssueCandidate

        return IssueCandidate(
            name="trailer",
            supporting_images=tuple(f"i{k}" for k in range(n)),
            mention_count=n,
            already_detectable=False,
            decision=DECISION_NOVEL,
        )

    def test_all_true(self):
        assert finder_precision(self._candidate(10), lambda i: True) == 1.0

    def test_seven_of_ten(self):
        cand = self._candidate(10)
        truthy = {f"i{k}" for k in range(7)}
        assert finder_precision(cand, lambda i: i in truthy) == 0.7

    def test_empty_support_rejected(self):
        with pytest.raises(ValueError):
            finder_precision(self._candidate(0), lambda i: True)


class TestIssueScanOnSimWorld:
    def test_perfect_captioner_always_reports_present_novel(self):
        config = SimWorldConfig(
            seed=5, num_images=60, num_categories=5, embedding_dim=16,
            captioner_recall=1.0, captioner_hallucination=0.0,
        )
        world = generate_world(config)
        ls = initial_label_space(world, 4)  # category 4 is out of the space
        novel_name = config.category_names[4]
        bearing = [i for i in world.image_ids() if 4 in world.categories_in(i)]
        assert len(bearing) >= 3
        detector = SimDetector(world, new_detector_state(ls, config.embedding_dim))
        vocab = list(config.category_names)
        report = issue_scan(bearing, SimCaptioner(world), detector, ls, vocab)
        novel = [c for c in report.novel() if c.name == novel_name]
        assert len(novel) == 1
        assert novel[0].mention_count == len(bearing)
