"""Command-line entry point: split, summary, gradcheck, train, eval, predict.

Options may also come from a ``key=value`` file passed with ``--config``;
flags given on the command line override it.
"""

from __future__ import annotations

import argparse
import logging
import sys
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from . import gradcheck
from .data import Manifest, discover_classes, list_images, stratified_split
from .errors import AdnetError, ConfigError
from .metrics import MetricsLog, write_confusion_csv
from .model import CLASS_NAMES, ModelConfig, build_adnet, param_count, parse_scale, render_summary, summarize
from .train import RunConfig, evaluate_split, load_model, model_config_for, predict_image, store_dtype, train

PROG = "adnet"


def _fraction(text: str) -> Fraction:
    try:
        return Fraction(text)
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a rational number: {text!r}") from None


def _scale(text: str) -> Fraction:
    try:
        return parse_scale(text)
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off", ""):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def read_config(path: str) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment. Dashes in keys become underscores."""
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=PROG, description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="key=value file with option defaults")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="stratified train/test manifest from a class-per-directory tree")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--fraction", type=_fraction, default=Fraction(9, 10))
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--classes", help="comma-separated class directories, in label order")

    p = sub.add_parser("summary", help="layer table and parameter counts")
    p.add_argument("--filter-scale", type=_scale, default=Fraction(1))

    p = sub.add_parser("gradcheck", help="finite-difference verification of every backward op")
    p.add_argument("--op", choices=sorted(gradcheck.CHECKS), action="append",
                   help="restrict to this check (repeatable)")
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--seeds", type=int, default=20, help="number of consecutive seeds")

    p = sub.add_parser("train", help="fit the model on a manifest's train split")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--metrics", type=Path, default=Path("metrics.csv"))
    p.add_argument("--deterministic", type=_bool, nargs="?", const=True, default=False)
    p.add_argument("--filter-scale", type=_scale, default=Fraction(1))
    p.add_argument("--precision", type=int, choices=(32, 64), default=32)
    p.add_argument("--eval-each-epoch", type=_bool, nargs="?", const=True, default=False)
    p.add_argument("--val-fraction", type=_fraction, default=None,
                   help="carve a stratified validation split out of train")
    p.add_argument("--checkpoint", type=_bool, nargs="?", const=True, default=False,
                   help="store Adam moments with the weights")
    p.add_argument("--resize", type=_bool, nargs="?", const=True, default=False)

    p = sub.add_parser("eval", help="metrics and confusion matrix on one split")
    p.add_argument("--weights", required=True, type=Path)
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--split", choices=("train", "test", "val"), default="test")
    p.add_argument("--confusion", type=Path, default=Path("confusion.csv"))
    p.add_argument("--metrics", type=Path, default=None)
    p.add_argument("--filter-scale", type=_scale, default=Fraction(1))
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--resize", type=_bool, nargs="?", const=True, default=False)

    p = sub.add_parser("predict", help="class probabilities for one image")
    p.add_argument("--weights", required=True, type=Path)
    p.add_argument("--image", required=True, type=Path)
    p.add_argument("--filter-scale", type=_scale, default=Fraction(1))
    p.add_argument("--manifest", type=Path, help="take class names from this manifest")
    p.add_argument("--resize", type=_bool, nargs="?", const=True, default=False)
    return parser


def cmd_split(args) -> int:
    classes = args.classes.split(",") if args.classes else None
    names = discover_classes(args.data, classes)
    items = list_images(args.data, names)
    manifest = stratified_split(items, args.fraction, args.seed, names)
    manifest.write(args.out)
    counts = manifest.counts()
    width = max(len("class"), *(len(n) for n in names))
    print(f"{'class':<{width}}  {'train':>6}  {'test':>6}")
    for i, name in enumerate(names):
        print(f"{name:<{width}}  {counts['train'][i]:>6}  {counts['test'][i]:>6}")
    print(f"{'total':<{width}}  {sum(counts['train']):>6}  {sum(counts['test']):>6}")
    return 0


def cmd_summary(args) -> int:
    cfg = ModelConfig(filter_scale=args.filter_scale)
    graph, store = build_adnet(cfg, 0, dtype=np.float32)
    print(render_summary(summarize(graph, store), param_count(store)))
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(args.op, seed=args.seed, seeds=args.seeds)
    ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        ok &= r.passed
        print(f"{r.name:<14} worst_rel_err={r.worst:.3e}  tol={r.tolerance:.0e}  seeds={r.seeds}  {status}")
    return 0 if ok else 1


def cmd_train(args) -> int:
    run = RunConfig(
        manifest=args.manifest,
        out=args.out,
        metrics=args.metrics,
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        seed=args.seed,
        filter_scale=args.filter_scale,
        precision=args.precision,
        deterministic=args.deterministic,
        eval_each_epoch=args.eval_each_epoch,
        val_fraction=args.val_fraction,
        checkpoint=args.checkpoint,
        resize=args.resize,
    )
    result = train(run)
    last = {split: rep for _, split, rep in result.history}
    for split, rep in last.items():
        print(f"{split}: loss={rep.mean_loss:.4f} accuracy={rep.accuracy:.4f}")
    print(f"weights written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    manifest = Manifest.read(args.manifest)
    graph, store = load_model(args.weights, model_config_for(manifest, args.filter_scale))
    report = evaluate_split(graph, store, manifest, args.split, args.batch_size,
                            store_dtype(store), args.resize)
    if report is None:
        raise ConfigError(f"split {args.split!r} of {args.manifest} is empty")
    write_confusion_csv(report.confusion, args.confusion)
    if args.metrics:
        MetricsLog(args.metrics, manifest.class_names).append("final", args.split, report)
    print(f"{args.split} accuracy: {report.accuracy:.4f} ({int(np.trace(report.confusion.counts))}"
          f"/{report.confusion.total})")
    return 0


def cmd_predict(args) -> int:
    names = Manifest.read(args.manifest).class_names if args.manifest else list(CLASS_NAMES)
    cfg = ModelConfig(filter_scale=args.filter_scale, num_classes=len(names))
    graph, store = load_model(args.weights, cfg)
    probs = predict_image(graph, store, args.image, args.resize)
    for name, p in zip(names, probs):
        print(f"{name}: {float(p):.6f}")
    print(f"prediction: {names[int(np.argmax(probs))]}")
    return 0


COMMANDS = {
    "split": cmd_split,
    "summary": cmd_summary,
    "gradcheck": cmd_gradcheck,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        pre = argparse.ArgumentParser(add_help=False)
        pre.add_argument("--config")
        known, rest = pre.parse_known_args(argv)
        command = next((a for a in rest if not a.startswith("-")), None)
        if known.config and command in COMMANDS:
            defaults = read_config(known.config)
            subparser = parser._subparsers._group_actions[0].choices[command]
            actions = {a.dest: a for a in subparser._actions}
            unknown = sorted(set(defaults) - set(actions))
            if unknown:
                raise ConfigError(f"{known.config}: unknown option(s) {unknown} for {command}")
            for key in defaults:
                actions[key].required = False
            subparser.set_defaults(**defaults)
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except AdnetError as exc:
        print(f"{PROG}: {exc.kind} error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
