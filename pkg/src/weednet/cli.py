"""Command-line entry point: ``weednet {summary,train,eval,predict,gradcheck}``."""
import argparse
import logging
import sys
import warnings
from pathlib import Path

from . import data, gradcheck
from .checkpoint import read_checkpoint
from .exceptions import WeedNetError
from .model import CLASS_NAMES, ArchitectureConfig, build, format_summary, summary_json
from .training import TrainConfig, evaluate, predict, train

# headline figures reported for the full dataset, shown next to achieved values
REFERENCE_ACCURACY = 0.940
REFERENCE_TEST_LOSS = 0.224

LAYER_TOLERANCE = 1e-5
GRAPH_TOLERANCE = 1e-4
# paper-profile training on more images than this needs --full
LONG_RUN_THRESHOLD = 500


def _add_common(p):
    p.add_argument("--profile", choices=["paper", "tiny"], default="paper")


def build_parser():
    parser = argparse.ArgumentParser(prog="weednet", description="Two-branch CNN for weed/crop image classification.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("summary", help="print the layer table")
    _add_common(p)
    p.add_argument("--json", action="store_true", help="emit a machine-readable summary")

    p = sub.add_parser("train", help="train on a dataset directory")
    _add_common(p)
    p.add_argument("--dataset-root", required=True)
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed-init", type=int, default=0)
    p.add_argument("--seed-split", type=int, default=101)
    p.add_argument("--seed-shuffle", type=int, default=0)
    p.add_argument("--out-dir", default="runs/weednet")
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--no-timing", action="store_true", help="write 0 in the seconds column (byte-reproducible CSV)")
    p.add_argument("--workers", type=int, default=1, help="image decoding threads")
    p.add_argument("--full", action="store_true", help="allow a long full-resolution run")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset-root", required=True)
    p.add_argument("--seed-split", type=int, default=101)
    p.add_argument("--split", choices=["test", "train", "all"], default="test")
    p.add_argument("--out-dir", default=None, help="also write confusion.txt here")

    p = sub.add_parser("predict", help="classify one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("image")

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--profile", choices=["paper", "tiny"], default="tiny")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--probes", type=int, default=4, help="probes per parameter tensor in the network check")
    return parser


def cmd_summary(args):
    graph = build(ArchitectureConfig.from_profile(args.profile), init="zeros")
    print(summary_json(graph) if args.json else format_summary(graph))
    return 0


def cmd_train(args):
    config = TrainConfig(
        dataset_root=args.dataset_root, out_dir=args.out_dir, profile=args.profile, epochs=args.epochs,
        batch_size=args.batch_size, learning_rate=args.lr, seed_init=args.seed_init, seed_split=args.seed_split,
        seed_shuffle=args.seed_shuffle, max_steps=args.max_steps, record_time=not args.no_timing,
        workers=args.workers,
    )
    scan = data.scan_dataset(args.dataset_root)
    print(f"dataset: {len(scan)} images {scan.counts}")
    if args.profile == "paper" and len(scan) > LONG_RUN_THRESHOLD:
        if not args.full:
            print(f"error: {len(scan)} images at 227x227 takes hours on a CPU; pass --full to proceed", file=sys.stderr)
            return 1
        warnings.warn("full-resolution training on the whole dataset: expect several hours", stacklevel=1)
    graph, history = train(config)
    last = history.epochs[-1]
    print(f"trained {len(history)} epochs, {len(history.step_losses)} steps")
    print(f"final: train_loss={last.train_loss:.4f} train_acc={last.train_accuracy:.4f} "
          f"val_loss={last.val_loss:.4f} val_acc={last.val_accuracy:.4f}")
    print(f"outputs in {Path(args.out_dir).resolve()}")
    return 0


def cmd_eval(args):
    ckpt = read_checkpoint(args.checkpoint)
    graph = ckpt.graph
    scan = data.scan_dataset(args.dataset_root)
    if args.split == "all":
        part = scan.files
    else:
        split = data.split_dataset(scan.files, seed=args.seed_split)
        part = split.test if args.split == "test" else split.train
    extent = graph.input_shape[0]
    result = evaluate(graph, part, load=lambda item: data.load_sample(item, extent))
    print(f"samples:  {result.confusion.total}")
    print(f"loss:     {result.loss:.4f}   (reference {REFERENCE_TEST_LOSS:.3f})")
    print(f"accuracy: {result.accuracy:.4f}   (reference {REFERENCE_ACCURACY:.3f})")
    print(result.confusion.to_text(), end="")
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "confusion.txt").write_text(result.confusion.to_text(), encoding="utf-8")
    return 0


def cmd_predict(args):
    graph = read_checkpoint(args.checkpoint).graph
    name, probs = predict(graph, args.image)
    print(name)
    for cls, p in zip(CLASS_NAMES, probs):
        print(f"  {cls:<10s} {p:.6f}")
    return 0


def cmd_gradcheck(args):
    ok = True
    worst = 0.0
    for r in gradcheck.layer_suite(args.seed):
        worst = max(worst, r.max_rel_error)
        print(f"layer  {r.name:<40s} max rel err {r.max_rel_error:.3e}")
    print(f"layer checks: max relative error {worst:.3e} (tolerance {LAYER_TOLERANCE:g})")
    ok &= worst <= LAYER_TOLERANCE
    results = gradcheck.graph_suite(args.profile, args.seed, probes_per_tensor=args.probes)
    worst = max(r.max_rel_error for r in results)
    for r in results:
        print(f"graph  {r.name:<40s} max rel err {r.max_rel_error:.3e} ({r.probes} probes, {r.skipped} at kinks)")
    print(f"network check ({args.profile}): max relative error {worst:.3e} (tolerance {GRAPH_TOLERANCE:g})")
    ok &= worst <= GRAPH_TOLERANCE
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


COMMANDS = {"summary": cmd_summary, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "gradcheck": cmd_gradcheck}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("weednet: error: a command is required", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except WeedNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
