"""Command line entry point: ``cdrscope <stage> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

from . import __version__
from .pipeline import ConfigError, PipelineConfig, StageError, run_pipeline

log = logging.getLogger("cdrscope")

EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON pipeline config")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--threads", type=int, help="BLAS / numba thread cap")
    common.add_argument("--out-dir", help="output directory (overrides config)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cdrscope", description="CDR network metrics and default-risk models")
    p.add_argument("--version", action="version", version=f"cdrscope {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    sub.add_parser("graph", parents=[common], help="weighted graph, cutoff sweep, degree tails")
    sub.add_parser("metrics", parents=[common], help="centrality, reciprocity, weight fits")
    sub.add_parser("communities", parents=[common], help="SLPA cover and district overlap")
    f = sub.add_parser("features", parents=[common], help="feature matrix")
    f.add_argument("--groups", help="comma-separated feature groups")
    f.add_argument("--features-out", help="copy the feature files to this directory")
    t = sub.add_parser("train", parents=[common], help="fit models")
    t.add_argument("--model", action="append", help="model name (repeatable)")
    e = sub.add_parser("evaluate", parents=[common], help="metrics, stability, ablation, importance")
    e.add_argument("--report", help="also copy report.json here")
    sub.add_parser("run", parents=[common], help="all stages")
    return p


def _load_config(args) -> PipelineConfig:
    obj = {}
    if args.config:
        try:
            with open(args.config) as fh:
                obj = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
    for key, attr in (("seed", "seed"), ("threads", "threads"), ("out_dir", "out_dir")):
        val = getattr(args, attr, None)
        if val is not None:
            obj[key] = val
    if getattr(args, "groups", None):
        obj["feature_groups"] = [g.strip().upper() for g in args.groups.split(",") if g.strip()]
    if getattr(args, "model", None):
        obj["models"] = args.model
        if obj.get("reference_model", PipelineConfig.reference_model) not in args.model:
            obj["reference_model"] = next((m for m in args.model if m != "random"), args.model[0])
    if args.command not in ("run",):
        # a single stage never needs generation unless it is the stage itself
        stages = ["generate"] if args.command == "generate" else [args.command]
        obj["stages"] = stages
        if args.command != "generate" and not obj.get("data_dir"):
            out = Path(obj.get("out_dir", PipelineConfig.out_dir))
            obj["data_dir"] = str(out / "data")
    return PipelineConfig.from_dict(obj)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
    except ConfigError as exc:
        print(json.dumps({"error": "validation", "message": str(exc)}), file=sys.stderr)
        return EXIT_VALIDATION
    try:
        result = run_pipeline(cfg)
    except ConfigError as exc:
        print(json.dumps({"error": "validation", "message": str(exc)}), file=sys.stderr)
        return EXIT_VALIDATION
    except StageError as exc:
        print(json.dumps({"error": "runtime", **exc.record()}), file=sys.stderr)
        return EXIT_RUNTIME
    out = Path(cfg.out_dir)
    if args.command == "features" and args.features_out:
        dest = Path(args.features_out)
        dest.mkdir(parents=True, exist_ok=True)
        for p in (out / "features").iterdir():
            shutil.copy2(p, dest / p.name)
    if args.command == "evaluate" and args.report:
        shutil.copy2(out / "report.json", args.report)
    if args.command in ("run", "evaluate"):
        for row in result.get("comparison", []):
            print(f"{row['model']:<16} recall={row['recall']:.3f} fallout={row['fallout']:.4f} "
                  f"precision={row['precision']:.4f} auc={row['auc']:.3f}")
    else:
        print(json.dumps(result.get(args.command, result), default=str))
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
