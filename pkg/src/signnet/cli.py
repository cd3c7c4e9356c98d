"""Command-line entry point: ``signnet {synth,train,eval,infer,stream,verify}``.

Exit codes: 0 success, 1 usage error, 2 data/format/config error,
3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import model as M
from .checkpoint import load_checkpoint
from .config import RunConfig
from .data import load_clip, read_manifest, synth_generate, eval_transform
from .errors import ConfigError, SignNetError, UsageError
from .gradcheck import run_gradient_suite
from .metrics import evaluate
from .optim import train
from .streaming import DEFAULT_STRIDE, DEFAULT_WINDOW, run_stream

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3

# Published full-size architecture values the verify command checks against.
REFERENCE_PARAMS = {"conv1": 5248, "conv2": 221312, "conv3": 884992, "fc1": 131328}
REFERENCE_LSTM_APPROX = 408_000_000
REFERENCE_SHAPES = [
    ("input", ("B", 3, 30, 224, 224)),
    ("conv1", ("B", 64, 30, 112, 112)),
    ("conv2", ("B", 128, 30, 56, 56)),
    ("conv3", ("B", 256, 30, 28, 28)),
    ("lstm", ("B", 30, 512)),
    ("classifier", ("B", "N")),
]

log = logging.getLogger("signnet")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg.validate()


def _print_json(obj) -> None:
    print(json.dumps(obj))


def cmd_synth(args) -> int:
    if args.classes < 2:
        raise UsageError("--classes must be at least 2")
    if args.per_class < 1:
        raise UsageError("--per-class must be at least 1")
    seed = args.seed if args.seed is not None else 0
    records = synth_generate(args.classes, args.per_class, args.frames, args.height, args.width,
                             seed, args.out)
    print(Path(args.out) / "manifest.jsonl")
    log.info("wrote %d clips", len(records))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args)
    manifest = args.manifest or cfg.manifest
    if not manifest:
        raise UsageError("no manifest given (use --manifest or the config's 'manifest')")
    if not Path(manifest).is_file():
        raise ConfigError(f"manifest not found: {manifest}")
    if args.max_epochs is not None:
        cfg.max_epochs = args.max_epochs
    if args.record_timing:
        cfg.record_timing = True
    out = args.out or cfg.out_dir or "run"
    cfg.validate()
    _, history = train(cfg, manifest, cfg.seed, out)
    last = history.records[-1]
    _print_json({"checkpoint": str(Path(out) / "best.slck"), "epochs": len(history),
                 "val_loss": last.val_loss, "val_acc": last.val_acc})
    return EXIT_OK


def _load_model(args):
    expected = None
    if args.config:
        expected = RunConfig.load(args.config).model
    return load_checkpoint(args.checkpoint, expected)


def cmd_eval(args) -> int:
    model, meta = _load_model(args)
    records = read_manifest(args.manifest)
    report = evaluate(model, records, model.config, meta.glosses or None)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json())
    with open(out / "scores.jsonl", "w") as fh:
        for s in report.samples:
            fh.write(json.dumps(s) + "\n")
    _print_json({"metrics": str(out / "metrics.json"), "accuracy": report.accuracy,
                 "macro_f1": report.macro_f1})
    return EXIT_OK


def cmd_infer(args) -> int:
    model, meta = _load_model(args)
    clip = load_clip(args.clip)
    probs = M.predict_proba(model, eval_transform(clip, model.config)[None])[0]
    cls = int(np.argmax(probs))
    gloss = meta.glosses[cls] if meta.glosses else f"class_{cls}"
    _print_json({"class": cls, "gloss": gloss, "confidence": float(probs[cls])})
    return EXIT_OK


def cmd_stream(args) -> int:
    if args.stride < 1 or args.window < 1:
        raise UsageError("--stride and --window must be >= 1")
    model, meta = _load_model(args)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    _, summary = run_stream(args.source, model, args.stride, out / "predictions.jsonl",
                            args.window, meta.glosses or None)
    _print_json(summary)
    return EXIT_OK


def cmd_verify(args) -> int:
    ok = True
    full = M.ModelConfig.full()
    counts = M.param_count(full)
    for name, want in REFERENCE_PARAMS.items():
        got = counts[name]
        ok &= got == want
        print(f"{'PASS' if got == want else 'FAIL'}  params {name:<10} {got:>12,} (reference {want:,})")
    lstm = counts["lstm"]
    dev = abs(lstm - REFERENCE_LSTM_APPROX) / REFERENCE_LSTM_APPROX
    ok &= dev <= 0.02
    print(f"{'PASS' if dev <= 0.02 else 'FAIL'}  params lstm       {lstm:>12,} "
          f"reference (~408M) within 2% (off by {dev:.2%})")
    shapes = M.infer_shapes(full)
    for (name, got), (_, want) in zip(shapes, REFERENCE_SHAPES):
        want = tuple(full.num_classes if d == "N" else d for d in want)
        good = tuple(got) == want
        ok &= good
        print(f"{'PASS' if good else 'FAIL'}  shape  {name:<10} {got}")
    worst = 0.0
    for r in run_gradient_suite(args.seed or 0, args.coords, include_model=not args.skip_model):
        ok &= r.passed
        worst = max(worst, r.max_rel_error) if r.name != "model" else worst
        print(f"{'PASS' if r.passed else 'FAIL'}  grad   {r.name:<22} max rel err {r.max_rel_error:.3e} "
              f"(tol {r.tolerance:g})")
    print(f"layer gradient max rel err {worst:.3e}")
    print("ALL PASS" if ok else "VERIFICATION FAILED")
    return EXIT_OK if ok else EXIT_VERIFY


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON")
    common.add_argument("--seed", type=int, default=None, help="master seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="signnet", description="3D CNN-LSTM sign recognition toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--per-class", type=int, default=20)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--manifest")
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--record-timing", action="store_true",
                   help="write wall-clock seconds into history.json (breaks byte-identity)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", parents=[common], help="classify one clip")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clip", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("stream", parents=[common], help="sliding-window inference")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True, help="SLRC clip or directory of clips")
    p.add_argument("--stride", type=int, default=DEFAULT_STRIDE)
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("verify", parents=[common], help="architecture and gradient self-checks")
    p.add_argument("--coords", type=int, default=20)
    p.add_argument("--skip-model", action="store_true", help="skip the whole-network gradient check")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"signnet: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SignNetError, OSError) as exc:
        print(f"signnet: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
