"""The ``aide`` command line.

Subcommands mirror the loop stages (simgen, scan, feed, update, verify,
retrain, report) plus ``run`` for the whole loop. Exit codes: 0 ok,
2 config error, 3 adapter failure, 4 corrupt state, 1 anything else.

Environment: AIDE_RUN_ROOT (default run root), AIDE_ADAPTER_URL (remote
adapter base url), AIDE_TOKEN_VAR (name of the env var holding the review
bearer token).
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

from ..errors import AdapterUnavailable, ConfigError, CorruptManifest, StageOrderError
from .config import EngineConfig, load_config
from .manifest import (
    STAGE_FEED,
    STAGE_FIND_ISSUE,
    STAGE_RETRAIN,
    STAGE_UPDATE,
    STAGE_VERIFY,
)
from .runner import EngineRun

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_ADAPTER = 3
EXIT_CORRUPT = 4


def _root(args) -> Path:
    return Path(args.root or os.environ.get("AIDE_RUN_ROOT", "runs"))


def _config(args) -> EngineConfig:
    config = load_config(args.config) if args.config else EngineConfig()
    url = os.environ.get("AIDE_ADAPTER_URL")
    if url:
        config = dataclasses.replace(config, adapter_url=url)
    token_var = os.environ.get("AIDE_TOKEN_VAR")
    if token_var:
        config = dataclasses.replace(config, token_env=token_var)
    return config


def _open(args) -> EngineRun:
    return EngineRun.resume(_root(args), args.run)


def _expect_stage(run: EngineRun, wanted: str) -> None:
    stage = run.next_stage()
    if stage != wanted:
        raise ConfigError(
            f"next stage for run {run.manifest.run_id!r} is {stage}, not {wanted}"
        )


def cmd_simgen(args) -> int:
    run = EngineRun.create(_root(args), args.run, _config(args))
    world = run.world.config
    print(f"run {args.run}: world of {world.num_images} images, "
          f"{world.num_categories} categories (d={world.embedding_dim}), "
          f"{run.config.num_known} known; baseline known AP "
          f"{(run.manifest.baseline_known or 0.0) * 100:.1f}%")
    return EXIT_OK


def cmd_scan(args) -> int:
    run = _open(args)
    _expect_stage(run, STAGE_FIND_ISSUE)
    run.run_iteration()
    from ..finder import load_issue_report

    report = load_issue_report(run.run_dir / "issues.json")
    print(f"{'candidate':<24}{'mentions':>9}  {'decision':<9}detectable")
    for cand in report.candidates:
        print(f"{cand.name:<24}{cand.mention_count:>9}  {cand.decision:<9}"
              f"{'yes' if cand.already_detectable else 'no'}")
    if not report.candidates:
        print("(no out-of-label-space mentions)")
    return EXIT_OK


def cmd_feed(args) -> int:
    run = _open(args)
    _expect_stage(run, STAGE_FEED)
    run.run_iteration(feed_category=args.category)
    notes = run.manifest.records[-1].notes
    print(f"retrieved {notes['retrieved']} images for {notes['category']!r}"
          f"{' (floor applied)' if notes.get('floor_applied') else ''}")
    return EXIT_OK


def cmd_update(args) -> int:
    run = _open(args)
    _expect_stage(run, STAGE_UPDATE)
    run.run_iteration()
    notes = run.manifest.records[-1].notes
    print(f"trained on {notes['labels']} labels over {notes['images']} images "
          f"({notes['novel_labels']} novel)")
    return EXIT_OK


def cmd_verify(args) -> int:
    run = _open(args)
    try:
        runnable = run.next_stage() == STAGE_VERIFY
    except StageOrderError:
        runnable = False  # cases already built and awaiting review: just serve
    if runnable:
        run.run_iteration()
        notes = run.manifest.records[-1].notes
        print(f"built {notes['cases']} verification cases"
              f"{' (auto-passed: headless)' if notes['auto_passed'] else ''}")
    if args.serve:
        from .server import serve_run

        host, _, port = args.serve.rpartition(":")
        token = None
        if run.config.token_env:
            token = os.environ.get(run.config.token_env)
        assets = args.assets
        if assets is None:
            bundled = Path(__file__).resolve().parents[3] / "frontend" / "dist"
            assets = bundled if bundled.is_dir() else None
        try:
            server = serve_run(run, (host or "127.0.0.1", int(port)),
                               assets_dir=assets, token=token)
        except OSError as exc:
            print(f"bind failed: {exc}", file=sys.stderr)
            return EXIT_ERROR
        print(f"review service on http://{server.server_address[0]}:{server.server_address[1]}/ "
              f"(ctrl-c to stop)")
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            pass
        finally:
            server.server_close()
    return EXIT_OK


def cmd_retrain(args) -> int:
    run = _open(args)
    _expect_stage(run, STAGE_RETRAIN)
    run.run_iteration()
    notes = run.manifest.records[-1].notes
    print(f"retrained with {notes['corrections']} corrections "
          f"({notes['labels']} labels total)")
    return EXIT_OK


def cmd_report(args) -> int:
    run = _open(args)
    result, ledger = run.report()
    from ..evalcost import render_report_table

    _tsv, pretty = render_report_table(result, ledger)
    print(pretty, end="")
    print(f"\ntotal cost: {ledger.total_dollars_str()} "
          f"(files under {run.run_dir})")
    return EXIT_OK


def cmd_run(args) -> int:
    root = _root(args)
    manifest_path = root / args.run / "manifest.json"
    if manifest_path.exists():
        run = EngineRun.resume(root, args.run)
    else:
        run = EngineRun.create(root, args.run, _config(args))
    if args.headless and not run.config.headless:
        run.config = dataclasses.replace(run.config, headless=True)
    executed = []
    while True:
        stage = run.next_stage()
        if stage is None:
            break
        if args.until and executed.count(args.until) > 0:
            break
        executed.append(run.run_iteration())
        if args.until and executed[-1] == args.until:
            break
    print(f"executed: {' -> '.join(executed) if executed else '(nothing to do)'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aide",
        description="Self-improving detection data engine (simulated world at desk scale).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_flag=False):
        p.add_argument("--run", required=True, help="run id under the run root")
        p.add_argument("--root", default=None, help="run root (default $AIDE_RUN_ROOT or ./runs)")
        if config_flag:
            p.add_argument("--config", default=None, help="engine config file")

    p = sub.add_parser("simgen", help="generate world, embeddings, and pretrained detector")
    common(p, config_flag=True)
    p.set_defaults(func=cmd_simgen)

    p = sub.add_parser("scan", help="run the issue finder over a caption batch")
    common(p)
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("feed", help="retrieve candidate images for the novel category")
    common(p)
    p.add_argument("--category", default=None, help="override the novel category name")
    p.set_defaults(func=cmd_feed)

    p = sub.add_parser("update", help="pseudo-label retrieved images and train")
    common(p)
    p.set_defaults(func=cmd_update)

    p = sub.add_parser("verify", help="build verification cases; optionally serve review UI")
    common(p)
    p.add_argument("--serve", default=None, metavar="HOST:PORT",
                   help="serve the review API/UI (e.g. :8080)")
    p.add_argument("--assets", default=None, help="directory of built UI assets")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("retrain", help="fold reviewer corrections into training")
    common(p)
    p.set_defaults(func=cmd_retrain)

    p = sub.add_parser("report", help="AP/forgetting table plus the cost ledger totals")
    common(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("run", help="run the full loop (creates the run if absent)")
    common(p, config_flag=True)
    p.add_argument("--headless", action="store_true",
                   help="auto-accept candidates and auto-pass verification")
    p.add_argument("--until", default=None,
                   help="stop after this stage (crash/resume testing)")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageOrderError as exc:
        print(f"stage error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AdapterUnavailable as exc:
        print(f"adapter failure: {exc}", file=sys.stderr)
        return EXIT_ADAPTER
    except CorruptManifest as exc:
        print(f"corrupt run state: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except KeyboardInterrupt:
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
