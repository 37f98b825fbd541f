"""Command line entry point: ``binloc {synth,featurize,train,eval,predict,verify}``.

Exit codes: 0 success, 1 invalid input (config, manifest, audio format or a
failed verification), 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline
from .pipeline import ConfigError, SynthConfig, TrainConfig

log = logging.getLogger("binloc")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _common(p: argparse.ArgumentParser, out_help: str):
    p.add_argument("--config", type=Path, help="YAML config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", type=Path, help=out_help)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="binloc", description="Binaural multi-source sound localization")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize a labelled dataset")
    _common(p, "output directory (manifest.jsonl + clips/)")

    p = sub.add_parser("featurize", help="compute the feature cache for a manifest")
    p.add_argument("manifest", type=Path)
    p.add_argument("--force", action="store_true", help="recompute cached features")
    _common(p, "unused; features live next to the manifest")

    p = sub.add_parser("train", help="train a model")
    p.add_argument("manifest", type=Path)
    _common(p, "run directory (model.ckpt, train_log.jsonl)")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("manifest", type=Path)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--split", default="test")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--oracle", action="store_true", help="score the ground truth itself (pipeline check)")
    _common(p, "report directory (report.txt, metrics.csv)")

    p = sub.add_parser("predict", help="localize sources in a binaural WAV")
    p.add_argument("wav", type=Path)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--json", action="store_true", help="print JSON instead of a table")
    _common(p, "write the JSON result to this file")

    p = sub.add_parser("verify", help="check that manifest targets match their scenes")
    p.add_argument("manifest", type=Path)
    _common(p, "write the list of problems to this file")
    return ap


def _synth(a):
    cfg = SynthConfig.load(a.config) if a.config else SynthConfig()
    if a.seed is not None:
        cfg = replace(cfg, seed=a.seed)
    if a.out is None:
        raise ConfigError("synth needs --out")
    m = pipeline.cmd_synth(cfg, a.out, a.config.parent if a.config else None)
    print(f"wrote {len(m.records)} clips to {m.path}")
    return EXIT_OK


def _featurize(a):
    res = pipeline.cmd_featurize(pipeline.read_manifest(a.manifest), force=a.force)
    print(f"{res.written} written, {res.cached} cached, {len(res.errors)} failed")
    for e in res.errors:
        print(f"  {e}", file=sys.stderr)
    return EXIT_RUNTIME if res.errors else EXIT_OK


def _train(a):
    cfg = TrainConfig.load(a.config) if a.config else TrainConfig()
    if a.seed is not None:
        cfg = replace(cfg, seed=a.seed)
    if a.out is None:
        raise ConfigError("train needs --out")
    res = pipeline.cmd_train(pipeline.read_manifest(a.manifest), cfg, a.out)
    best = res.history[res.best_epoch - 1] if res.best_epoch else {}
    print(f"best epoch {res.best_epoch} of {res.stopped_epoch}: val_total={best.get('val_total', float('nan')):.4f}")
    return EXIT_OK


def _eval(a):
    if a.out is None:
        raise ConfigError("eval needs --out")
    if not a.oracle and a.checkpoint is None:
        raise ConfigError("eval needs --checkpoint (or --oracle)")
    res = pipeline.cmd_eval(pipeline.read_manifest(a.manifest), a.checkpoint, a.out, a.split, a.oracle, a.threshold)
    print(res.table, end="")
    return EXIT_OK


def _predict(a):
    dets = pipeline.cmd_predict(a.wav, a.checkpoint, a.threshold)
    rows = [
        {"coarse": d.sector.coarse, "fine": d.sector.fine, "azimuth_deg": d.doa.azimuth_deg,
         "elevation_deg": d.doa.elevation_deg, "probability": float(d.prob)}
        for d in dets
    ]
    if a.out:
        a.out.write_text(json.dumps(rows, indent=2))
    if a.json:
        print(json.dumps(rows, indent=2))
    else:
        print(f"{'sector':>8}  {'azimuth':>8}  {'elevation':>9}  {'prob':>6}")
        for r in rows:
            print(f"{r['coarse']:>4},{r['fine']:<3}  {r['azimuth_deg']:8.2f}  {r['elevation_deg']:9.2f}  {r['probability']:6.3f}")
    return EXIT_OK


def _verify(a):
    m = pipeline.read_manifest(a.manifest)
    problems = pipeline.cmd_verify(m)
    if a.out:
        a.out.write_text("".join(p + "\n" for p in problems))
    for p in problems:
        print(p, file=sys.stderr)
    print(f"{len(m.records)} records, {len(problems)} problem(s)")
    return EXIT_INVALID if problems else EXIT_OK


COMMANDS = {"synth": _synth, "featurize": _featurize, "train": _train, "eval": _eval, "predict": _predict, "verify": _verify}


def main(argv=None) -> int:
    a = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if a.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[a.command](a)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # anything else is a runtime failure
        log.debug("traceback", exc_info=True)
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
