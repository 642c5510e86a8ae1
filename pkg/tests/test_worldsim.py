import numpy as np
import pytest

from aide import kernels
from aide.adapters import TrainingSchedule
from aide.core import BoundingBox, Detection, iou
from aide.errors import EmptyTrainingSet, UnknownCategory, UnknownImage
from aide.evalcost import eval_report
from aide.feeder import cosine
from aide.worldsim import (
    SimDetector,
    SimDetectorState,
    SimWorldConfig,
    build_embedding_store,
    class_probabilities,
    eval_records,
    generate_world,
    initial_label_space,
    load_world,
    new_detector_state,
    pretrain_detector,
    render_raster,
    save_world,
    sim_caption,
    sim_detect,
    sim_embed_image,
    sim_embed_text,
    sim_propose,
    sim_scenarios,
    sim_train,
    sim_zsc,
)


def tiny_config(**overrides) -> SimWorldConfig:
    defaults = dict(seed=0, num_images=40, num_categories=4, embedding_dim=16)
    defaults.update(overrides)
    return SimWorldConfig(**defaults)


class _Label:
    __slots__ = ("detection",)

    def __init__(self, detection):
        self.detection = detection


def gt_entries(world, label_space):
    entries = {}
    for record in eval_records(world, label_space):
        labels = [_Label(g) for g in record.ground_truth or ()]
        if labels:
            entries[record.id] = labels
    return entries


class TestGenerateWorld:
    def test_same_seed_is_byte_identical(self):
        a = generate_world(tiny_config())
        b = generate_world(tiny_config())
        np.testing.assert_array_equal(a.prototypes, b.prototypes)
        assert a.image_ids() == b.image_ids()
        for image_id in a.image_ids():
            for oa, ob in zip(a.objects_of(image_id), b.objects_of(image_id)):
                assert oa.box == ob.box and oa.category == ob.category
                np.testing.assert_array_equal(oa.feature, ob.feature)

    def test_different_seed_differs(self):
        a = generate_world(tiny_config(seed=0))
        b = generate_world(tiny_config(seed=1))
        assert not np.array_equal(a.prototypes, b.prototypes)

    def test_zero_within_noise_features_equal_prototypes(self):
        world = generate_world(tiny_config(within_noise=0.0))
        for image_id in world.image_ids():
            for obj in world.objects_of(image_id):
                np.testing.assert_allclose(obj.feature, world.prototypes[obj.category], atol=1e-12)

    def test_object_count(self):
        world = generate_world(tiny_config(num_images=100, objects_per_image=(0.0, 1.0)))
        total = sum(len(world.objects_of(i)) for i in world.image_ids())
        assert total == 100
        gt_total = sum(len(img.ground_truth) for img in world.images)
        assert gt_total == 100

    def test_boxes_inside_bounds(self):
        world = generate_world(tiny_config())
        for img in world.images:
            for det in img.ground_truth:
                assert 0 <= det.box.x_min < det.box.x_max <= img.width
                assert 0 <= det.box.y_min < det.box.y_max <= img.height

    def test_save_load_regenerates(self, tmp_path):
        world = generate_world(tiny_config())
        save_world(world, tmp_path / "world.json")
        back = load_world(tmp_path / "world.json")
        np.testing.assert_array_equal(world.prototypes, back.prototypes)
        assert world.config == back.config


class TestEmbedding:
    def test_category_text_matches_pure_image(self):
        world = generate_world(tiny_config(within_noise=0.0, objects_per_image=(0.0, 1.0)))
        image_id = world.image_ids()[0]
        cat = world.objects_of(image_id)[0].category
        name = world.config.category_names[cat]
        q = sim_embed_text(world, name)
        v = sim_embed_image(world, image_id)
        assert cosine(q, v) == pytest.approx(1.0, abs=1e-12)

    def test_empty_image_embeds_to_background(self):
        world = generate_world(tiny_config(objects_per_image=(1.0,)))
        image_id = world.image_ids()[0]
        np.testing.assert_array_equal(sim_embed_image(world, image_id), world.background_vector)
        for c in range(world.config.num_categories):
            assert cosine(world.background_vector, world.prototypes[c]) < 1.0 - 1e-9

    def test_two_category_image_is_normalized_mean(self):
        world = generate_world(tiny_config(within_noise=0.0))
        for image_id in world.image_ids():
            objs = world.objects_of(image_id)
            if len({o.category for o in objs}) == 2 and len(objs) == 2:
                mean = (objs[0].feature + objs[1].feature) / 2
                expected = mean / np.linalg.norm(mean)
                np.testing.assert_allclose(sim_embed_image(world, image_id), expected, atol=1e-12)
                return
        pytest.skip("no two-category image in this tiny world")

    def test_longer_text_perturbs_but_stays_on_category(self):
        world = generate_world(tiny_config())
        name = world.config.category_names[0]
        base = sim_embed_text(world, name)
        phrase = sim_embed_text(world, f"A photo of a {name} at night")
        assert 0.5 < cosine(base, phrase) < 1.0 - 1e-9

    def test_unknown_image_raises(self):
        world = generate_world(tiny_config())
        with pytest.raises(UnknownImage):
            sim_embed_image(world, "nope")


class TestCaption:
    def test_full_recall_no_hallucination(self):
        world = generate_world(tiny_config(captioner_recall=1.0, captioner_hallucination=0.0))
        for image_id in world.image_ids():
            caption = sim_caption(world, image_id)
            present = {world.config.category_names[c] for c in world.categories_in(image_id)}
            if not present:
                assert caption == "An image with nothing"
            else:
                listed = set(caption.removeprefix("An image with ").split(", "))
                assert listed == present

    def test_always_hallucinates_exactly_one_absent(self):
        world = generate_world(tiny_config(captioner_recall=1.0, captioner_hallucination=1.0))
        vocab = set(world.config.category_names) | set(world.config.distractor_names)
        for image_id in world.image_ids()[:20]:
            caption = sim_caption(world, image_id)
            present = {world.config.category_names[c] for c in world.categories_in(image_id)}
            listed = [t for t in caption.removeprefix("An image with ").split(", ") if t != "nothing"]
            absent_mentions = [t for t in listed if t not in present]
            assert len(absent_mentions) == 1
            assert absent_mentions[0] in vocab

    def test_deterministic(self):
        world = generate_world(tiny_config())
        image_id = world.image_ids()[3]
        assert sim_caption(world, image_id) == sim_caption(world, image_id)


class TestPropose:
    def test_perfect_proposer_returns_gt(self):
        world = generate_world(
            tiny_config(proposer_recall=1.0, box_jitter=0.0, false_positive_rate=0.0)
        )
        for image_id in world.image_ids():
            proposals = sim_propose(world, image_id)
            gt_boxes = [o.box for o in world.objects_of(image_id)]
            assert [p[0] for p in proposals] == gt_boxes

    def test_zero_recall_empty(self):
        world = generate_world(tiny_config(proposer_recall=0.0, false_positive_rate=0.0))
        for image_id in world.image_ids():
            assert sim_propose(world, image_id) == []

    def test_small_jitter_overlaps_source(self):
        world = generate_world(
            tiny_config(proposer_recall=1.0, box_jitter=3.0, false_positive_rate=0.0)
        )
        for image_id in world.image_ids():
            objs = world.objects_of(image_id)
            for (box, _, _), obj in zip(sim_propose(world, image_id), objs):
                assert iou(box, obj.box) > 0.0

    def test_scores_in_unit_interval(self):
        world = generate_world(tiny_config())
        for image_id in world.image_ids():
            for _, _, score in sim_propose(world, image_id):
                assert 0.0 <= score <= 1.0


class TestZsc:
    def test_exact_box_zero_noise_recovers_category(self):
        world = generate_world(tiny_config(within_noise=0.0, zsc_context_noise=0.0))
        names = list(world.config.category_names) + ["background"]
        for image_id in world.image_ids():
            for obj in world.objects_of(image_id):
                scores = sim_zsc(world, image_id, obj.box, names)
                assert int(np.argmax(scores)) == obj.category

    def test_far_box_prefers_background(self):
        world = generate_world(tiny_config(num_images=60))
        names = list(world.config.category_names) + ["background"]
        checked = 0
        for image_id in world.image_ids():
            probe = BoundingBox(0.5, 0.5, 6.5, 6.5)  # tiny corner box
            if any(iou(probe, o.box) >= 0.1 for o in world.objects_of(image_id)):
                continue
            scores = sim_zsc(world, image_id, probe, names)
            assert int(np.argmax(scores)) == len(names) - 1
            checked += 1
        assert checked > 0

    def test_softmax_properties(self):
        world = generate_world(tiny_config())
        names = list(world.config.category_names) + ["background"]
        image_id = world.image_ids()[0]
        scores = sim_zsc(world, image_id, BoundingBox(10, 10, 90, 90), names)
        assert len(scores) == len(names)
        assert all(s > 0 for s in scores)
        assert sum(scores) == pytest.approx(1.0, abs=1e-9)


class TestDetector:
    def test_untrained_probabilities_uniform(self):
        world = generate_world(tiny_config())
        ls = initial_label_space(world, 4)
        state = new_detector_state(ls, world.config.embedding_dim)
        feature = world.objects_of(world.image_ids()[1])[0].feature
        p = class_probabilities(state, feature)
        np.testing.assert_allclose(p, np.full(5, 1 / 5), atol=1e-12)
        # uniform argmax resolves to background: nothing is emitted
        assert sim_detect(state, world, world.image_ids()[1]) == []

    def test_trained_detector_recovers_categories(self):
        world = generate_world(tiny_config(num_images=120))
        ls = initial_label_space(world, 4)
        state, gpu_hours = pretrain_detector(world, ls, TrainingSchedule(iterations=1500))
        assert gpu_hours > 0
        correct = total = 0
        for image_id in world.image_ids():
            for obj in world.objects_of(image_id):
                p = class_probabilities(state, obj.feature)
                row = int(np.argmax(p))
                total += 1
                correct += int(row == 1 + obj.category)
        assert correct / total > 0.9

    def test_empty_image_detects_nothing(self):
        world = generate_world(tiny_config(objects_per_image=(0.4, 0.6)))
        ls = initial_label_space(world, 4)
        state, _ = pretrain_detector(world, ls, TrainingSchedule(iterations=50))
        empty = [i for i in world.image_ids() if not world.objects_of(i)]
        assert empty
        assert sim_detect(state, world, empty[0]) == []

    def test_with_category_appends_zero_row(self):
        world = generate_world(tiny_config())
        ls = initial_label_space(world, 3)
        state = new_detector_state(ls, world.config.embedding_dim)
        extended = state.with_category(7)
        assert extended.category_ids == (0, 1, 2, 7)
        np.testing.assert_array_equal(extended.weights[-1], np.zeros(16))
        np.testing.assert_array_equal(extended.weights[:-1], state.weights)
        assert extended.row_of(7) == 4
        with pytest.raises(UnknownCategory):
            state.row_of(7)

    def test_state_round_trip(self):
        world = generate_world(tiny_config())
        ls = initial_label_space(world, 4)
        state, _ = pretrain_detector(world, ls, TrainingSchedule(iterations=20))
        back = SimDetectorState.from_dict(state.to_dict())
        np.testing.assert_array_equal(back.weights, state.weights)
        assert back.category_ids == state.category_ids


class TestTrain:
    def test_zero_iterations_identity(self):
        world = generate_world(tiny_config())
        ls = initial_label_space(world, 4)
        state = new_detector_state(ls, world.config.embedding_dim)
        entries = gt_entries(world, ls)
        out, gpu_hours = sim_train(state, world, entries, TrainingSchedule(iterations=0))
        np.testing.assert_array_equal(out.weights, state.weights)
        assert gpu_hours == 0

    def test_empty_training_set_raises(self):
        world = generate_world(tiny_config())
        ls = initial_label_space(world, 4)
        state = new_detector_state(ls, world.config.embedding_dim)
        with pytest.raises(EmptyTrainingSet):
            sim_train(state, world, {}, TrainingSchedule(iterations=10))

    def test_training_one_category_raises_heldout_loss(self):
        # two-category world: novel-only training must hurt the known pairs
        world = generate_world(
            tiny_config(num_categories=2, num_images=120, objects_per_image=(0.2, 0.8))
        )
        ls = initial_label_space(world, 2)
        state, _ = pretrain_detector(world, ls, TrainingSchedule(iterations=800))
        entries = gt_entries(world, ls)
        cat0 = {
            k: [l for l in v if l.detection.category == 0]
            for k, v in entries.items()
        }
        cat0 = {k: v for k, v in cat0.items() if v}
        cat1_pairs = []
        for k, v in entries.items():
            for l in v:
                if l.detection.category == 1:
                    cat1_pairs.append((k, l.detection))
        X1 = np.stack([
            max(world.objects_of(k), key=lambda o: iou(o.box, d.box)).feature
            for k, d in cat1_pairs
        ])
        y1 = np.full(len(cat1_pairs), 2, dtype=np.int64)  # rows: bg=0, cat0=1, cat1=2
        before = kernels.softmax_ce_loss(state.weights, X1, y1)
        trained, _ = sim_train(state, world, cat0, TrainingSchedule(iterations=1500))
        after = kernels.softmax_ce_loss(trained.weights, X1, y1)
        assert after > before

    def test_full_batch_loss_non_increasing_small_lr(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(12, 6))
        y = rng.integers(0, 3, size=12).astype(np.int64)
        W = rng.normal(size=(3, 6)) * 0.1
        batch = np.tile(np.arange(12), (40, 1))
        losses = [kernels.softmax_ce_loss(W, X, y, 0.0)]
        cur = W
        for step in range(40):
            cur = kernels.sgd_train(cur, X, y, batch[step : step + 1], 0.05, 0.0)
            losses.append(kernels.softmax_ce_loss(cur, X, y, 0.0))
        assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))

    def test_gradient_matches_central_finite_differences(self):
        rng = np.random.default_rng(42)
        for _ in range(8):
            c, d, n = 3, 4, 5
            W = rng.normal(size=(c, d))
            X = rng.normal(size=(n, d))
            y = rng.integers(0, c, size=n).astype(np.int64)
            wd = float(rng.choice([0.0, 1e-2]))
            grad = kernels.softmax_ce_grad(W, X, y, wd)
            eps = 1e-6
            fd = np.zeros_like(W)
            for i in range(c):
                for j in range(d):
                    up = W.copy()
                    dn = W.copy()
                    up[i, j] += eps
                    dn[i, j] -= eps
                    fd[i, j] = (
                        kernels.softmax_ce_loss(up, X, y, wd) - kernels.softmax_ce_loss(dn, X, y, wd)
                    ) / (2 * eps)
            rel = np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-12)
            assert rel < 1e-5

    def test_train_is_deterministic(self):
        world = generate_world(tiny_config())
        ls = initial_label_space(world, 4)
        state = new_detector_state(ls, world.config.embedding_dim)
        entries = gt_entries(world, ls)
        a, _ = sim_train(state, world, entries, TrainingSchedule(iterations=100))
        b, _ = sim_train(state, world, entries, TrainingSchedule(iterations=100))
        np.testing.assert_array_equal(a.weights, b.weights)


class TestScenarios:
    def test_injective_and_deterministic(self):
        a = sim_scenarios(0, "trailer", 12)
        b = sim_scenarios(0, "trailer", 12)
        assert a == b
        assert len(set(a)) == 12
        assert all("trailer" in s for s in a)

    def test_seed_changes_order(self):
        assert sim_scenarios(0, "trailer", 5) != sim_scenarios(1, "trailer", 5)


class TestAdaptersAndViews:
    def test_detector_adapter_trains_in_place(self):
        world = generate_world(tiny_config())
        ls = initial_label_space(world, 4)
        detector = SimDetector(world, new_detector_state(ls, world.config.embedding_dim))
        entries = gt_entries(world, ls)
        gpu = detector.train(entries, TrainingSchedule(iterations=60))
        assert gpu > 0
        assert detector.state.steps_trained == 60

    def test_eval_records_translate_ids(self):
        world = generate_world(tiny_config())
        ls = initial_label_space(world, 2)  # drop two categories
        records = eval_records(world, ls)
        kept = {d.category for r in records for d in r.ground_truth or ()}
        assert kept <= {0, 1}

    def test_pretrained_known_ap_is_high(self):
        world = generate_world(tiny_config(num_images=150))
        ls = initial_label_space(world, 4)
        state, _ = pretrain_detector(world, ls, TrainingSchedule(iterations=1500))
        detector = SimDetector(world, state)
        report = eval_report(detector, eval_records(world, ls), ls)
        assert report.known_avg is not None and report.known_avg > 0.8

    def test_embedding_store_covers_world(self):
        world = generate_world(tiny_config())
        store = build_embedding_store(world)
        assert len(store) == world.config.num_images
        assert store.dimension == world.config.embedding_dim

    def test_render_raster_is_png(self):
        world = generate_world(tiny_config())
        data = render_raster(world, world.image_ids()[0])
        assert data.startswith(b"\x89PNG\r\n\x1a\n")
        assert data.endswith(b"IEND\xaeB`\x82")
