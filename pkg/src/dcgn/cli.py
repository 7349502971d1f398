"""``dcgn`` command line: synth, segment, train, eval, gradcheck.

stdout carries JSON only; diagnostics go to stderr.

Exit codes:
    0  success
    2  configuration or usage error (includes undefined metrics)
    3  I/O error
    4  feature file format error
    5  training aborted on a non-finite loss or gradient
    6  checkpoint missing, malformed, or incompatible with the data
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data_io, shots, training
from .config import ConfigError, RunConfig, load_config
from .gradcheck import run_gradcheck
from .metrics import UndefinedMetricError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_FORMAT = 4
EXIT_NONFINITE = 5
EXIT_CHECKPOINT = 6

log = logging.getLogger("dcgn")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj) + "\n")
    sys.stdout.flush()


def _write_resolved(cfg: RunConfig, path) -> None:
    if path is None:
        print("resolved config: " + json.dumps(cfg.to_dict()), file=sys.stderr)
    else:
        cfg.write(path)


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    if cfg.synth is None:
        raise ConfigError("config has no 'synth' section (needs at least synth.num_classes and synth.dim)")
    if args.count < 1:
        raise ConfigError("--count must be >= 1")
    out = Path(args.out)
    manifest = data_io.synth_corpus(cfg.synth, args.count, out)
    result = {"manifest": str(manifest), "count": args.count}
    if args.val_count:
        val = data_io.synth_corpus(cfg.synth, args.val_count, out, offset=args.count,
                                   manifest_name="val.jsonl")
        result.update(val_manifest=str(val), val_count=args.val_count)
    cfg.write(out / "resolved_config.json")
    print(f"wrote {args.count} videos to {out}", file=sys.stderr)
    _emit(result)
    return EXIT_OK


def cmd_segment(args) -> int:
    cfg = load_config(args.config)
    if args.c is not None:
        cfg.kts.c_penalty = args.c
    if args.m_max is not None:
        cfg.kts.m_max = args.m_max
    frames = data_io.read_features(args.features)
    costs = shots.segment_costs(frames)
    try:
        if args.auto:
            m_max = cfg.kts.m_max if cfg.kts.m_max is not None else costs.n
            detail = shots.kts_auto_detail(costs, cfg.kts.c_penalty, m_max)
            bounds = detail.boundaries
            extra = {"objective": detail.objective, "c_penalty": cfg.kts.c_penalty}
        else:
            bounds = shots.kts_fixed(costs, args.m)
            extra = {}
    except shots.SegmentationError as exc:
        raise ConfigError(str(exc)) from None
    if args.dump_similarity:
        np.savetxt(args.dump_similarity, shots.similarity_matrix(frames))
    _write_resolved(cfg, args.resolved_config)
    _emit({"cuts": list(bounds.cuts), "cost": costs.total(bounds), "m": bounds.m, **extra})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    result = training.run_training(cfg.train, cfg.model, args.train, args.val, out)
    resolved = dataclasses.replace(cfg, model=result.model.model_cfg)
    resolved.write(out / "resolved_config.json")
    _emit({"reports": result.reports, "checkpoint": str(out / "model.dcgm")})
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        model = training.load_model(args.checkpoint)
    except (training.CheckpointError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise CliError(EXIT_CHECKPOINT, f"cannot load checkpoint: {exc}") from None
    examples = training.load_examples(args.manifest, model.model_cfg, model.train_cfg)
    report = training.evaluate(model, examples)
    cfg = RunConfig(train=model.train_cfg, model=model.model_cfg)
    _write_resolved(cfg, args.resolved_config)
    _emit(report)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config)
    report = run_gradcheck(cfg.model, args.seed, args.epsilon, args.tol)
    for p in report.params:
        status = "ok" if p.passed else "FAIL"
        print(f"{status:4s} {p.name:18s} max_rel={p.max_rel_error:.3e}", file=sys.stderr)
    _write_resolved(cfg, args.resolved_config)
    _emit({
        "passed": report.passed,
        "seed": args.seed,
        "tol": report.tol,
        "epsilon": args.epsilon,
        "failures": report.failures,
        "params": {p.name: p.max_rel_error for p in report.params},
    })
    return EXIT_OK if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcgn", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--val-count", type=int, default=0,
                   help="also write val.jsonl with this many held-out videos")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("segment", help="split one feature file into shots")
    p.add_argument("--features", required=True)
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--m", type=int, help="fixed number of shots")
    mode.add_argument("--auto", action="store_true", help="pick the shot count with the penalty")
    p.add_argument("--c", type=float, help="penalty weight for --auto (default kts.c_penalty)")
    p.add_argument("--m-max", type=int, help="largest shot count tried by --auto")
    p.add_argument("--config")
    p.add_argument("--dump-similarity", metavar="PATH",
                   help="write the frame-by-frame similarity matrix as text")
    p.add_argument("--resolved-config", metavar="PATH")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config")
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--resolved-config", metavar="PATH")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--resolved-config", metavar="PATH")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, data_io.ManifestError, UndefinedMetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except data_io.FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except training.TrainingAbort as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except training.CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
