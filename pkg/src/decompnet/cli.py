"""Command-line entry point: synth, train, infer, eval, baseline, plot."""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, load_config
from .errors import DecompError

TASKS = ("detect", "segment")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _floats(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="decompnet", description="Recurrent instance decomposition on synthetic digit scenes.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate the synthetic dataset")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--mnist-dir", required=True)
    s.add_argument("--workers", type=int)

    t = sub.add_parser("train", help="train one stage")
    t.add_argument("--config")
    t.add_argument("--stage", required=True, choices=("category", "instance", "bbox", "finetune"))
    t.add_argument("--data", required=True)
    t.add_argument("--out-checkpoint", required=True)
    t.add_argument("--init-checkpoint")
    t.add_argument("--log", help="progress log (JSON lines); default: <out-checkpoint>.log.jsonl")

    i = sub.add_parser("infer", help="run the pipeline on a dataset split")
    i.add_argument("--config")
    i.add_argument("--task", required=True, choices=TASKS)
    i.add_argument("--checkpoint-dir", help="directory with <stage>.dcmp files, or one checkpoint file")
    i.add_argument("--data", required=True)
    i.add_argument("--split", default="test")
    i.add_argument("--limit", type=int)
    i.add_argument("--out", required=True)
    i.add_argument("--ground-truth", action="store_true", help="emit ground truth as results")

    e = sub.add_parser("eval", help="precision-recall curves from results")
    e.add_argument("--config")
    e.add_argument("--task", required=True, choices=TASKS)
    e.add_argument("--results", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--limit", type=int)
    e.add_argument("--iou", type=_floats)
    e.add_argument("--category", type=int, action="append")
    e.add_argument("--out", required=True)

    b = sub.add_parser("baseline", help="sliding-window detector")
    b.add_argument("--config")
    b.add_argument("--step", type=int, choices=(3, 5))
    b.add_argument("--data", required=True)
    b.add_argument("--split", default="test")
    b.add_argument("--limit", type=int)
    b.add_argument("--classifier", help="trained classifier checkpoint; trained from scratch if absent")
    b.add_argument("--save-classifier")
    b.add_argument("--out", required=True)

    pl = sub.add_parser("plot", help="overlay PR curves as SVG")
    pl.add_argument("--config")
    pl.add_argument("--pr", required=True, help="comma-separated PR CSV files")
    pl.add_argument("--labels", help="comma-separated legend labels")
    pl.add_argument("--title", default="")
    pl.add_argument("--out", required=True)
    return p


def _echo(section: str, value) -> None:
    print(json.dumps({section: value}, sort_keys=True))


def _workers() -> int:
    return max(1, int(os.environ.get("DECOMP_THREADS", os.cpu_count() or 1)))


def cmd_synth(args, cfg) -> None:
    from .dataset import load_mnist_dir, synth_dataset

    _echo("synth", cfg.synth.to_dict())
    archives = load_mnist_dir(args.mnist_dir)
    synth_dataset(archives, cfg.synth, args.out, workers=args.workers or _workers())
    print(f"wrote {cfg.synth.train_size} train and {cfg.synth.test_size} test samples to {args.out}")


def cmd_train(args, cfg) -> None:
    from .dataset import read_meta, read_split
    from .training import train_stage

    _echo("train", cfg.train.to_dict())
    meta = read_meta(args.data)
    samples = read_split(Path(args.data) / "train", limit=cfg.train.max_samples)
    init = load_checkpoint(args.init_checkpoint) if args.init_checkpoint else None
    log_path = Path(args.log or f"{args.out_checkpoint}.log.jsonl")
    log_path.parent.mkdir(parents=True, exist_ok=True)
    start = time.time()
    with open(log_path, "w") as log:
        def write(record):
            log.write(json.dumps(record) + "\n")
            log.flush()
        ckpt = train_stage(args.stage, samples, meta.categories, cfg.train, init, write)
    save_checkpoint(ckpt, args.out_checkpoint)
    last = ckpt.metadata["history"][-1] if ckpt.metadata["history"] else {}
    print(f"stage {args.stage}: {ckpt.metadata['epoch']} epochs, final loss {last.get('loss', float('nan')):.4f}, "
          f"{time.time() - start:.0f}s -> {args.out_checkpoint}")


def cmd_infer(args, cfg) -> None:
    from .dataset import read_split
    from .errors import DependencyError
    from .inference import detect, ground_truth_results, load_model, require_stages, segment, write_results

    _echo("infer", vars(cfg.infer))
    samples = read_split(Path(args.data) / args.split, limit=args.limit)
    if args.ground_truth:
        records = ground_truth_results(samples, args.task)
    else:
        if not args.checkpoint_dir:
            raise DependencyError("--checkpoint-dir is required unless --ground-truth is given")
        model, meta = load_model(args.checkpoint_dir)
        require_stages(meta, args.task)
        run = detect if args.task == "detect" else segment
        records = []
        for s in range(0, len(samples), 64):
            chunk = samples[s:s + 64]
            records += run(model, [x.image for x in chunk], [x.id for x in chunk], cfg.infer,
                           meta.get("categories"))
    write_results(args.out, records)
    print(f"wrote {len(records)} results for {len(samples)} images to {args.out}")


def _suffixed(out: str, category: int, iou: float, many: bool) -> Path:
    path = Path(out)
    if not many:
        return path
    return path.with_name(f"{path.stem}_c{category}_iou{iou:g}{path.suffix}")


def cmd_eval(args, cfg) -> None:
    from .dataset import read_meta, read_split
    from .evaluation import ground_truth_index, pr_curve, write_pr_csv
    from .inference import read_results

    ious = args.iou or list(cfg.eval.iou_thresholds)
    cats = args.category or list(cfg.eval.categories or read_meta(args.data).categories)
    _echo("eval", {"iou_thresholds": ious, "categories": cats})
    samples = read_split(Path(args.data) / args.split, limit=args.limit)
    results = read_results(args.results)
    kind = "box" if args.task == "detect" else "mask"
    many = len(ious) * len(cats) > 1
    for cat in cats:
        gt = ground_truth_index(samples, cat, kind)
        dets = [r for r in results if r.get("category") == cat]
        for iou in ious:
            curve = pr_curve(dets, gt, iou, kind, cat)
            path = _suffixed(args.out, cat, iou, many)
            write_pr_csv(path, curve)
            print(f"category {cat} iou {iou:g}: AP={curve.average_precision:.4f} -> {path}")


def cmd_baseline(args, cfg) -> None:
    from .baseline import (classifier_from_checkpoint, classifier_to_checkpoint, sliding_window_detect,
                           train_baseline_classifier)
    from .dataset import read_meta, read_split
    from .inference import write_results

    bcfg = cfg.baseline
    if args.step is not None:
        bcfg.step = args.step
    _echo("baseline", bcfg.to_dict())
    cats = list(read_meta(args.data).categories)
    if args.classifier:
        clf = classifier_from_checkpoint(load_checkpoint(args.classifier))
    else:
        clf = train_baseline_classifier(read_split(Path(args.data) / "train"), cats, bcfg)
        if args.save_classifier:
            save_checkpoint(classifier_to_checkpoint(clf, cats, bcfg), args.save_classifier)
    samples = read_split(Path(args.data) / args.split, limit=args.limit)
    records = []
    for s in samples:
        records += sliding_window_detect(clf, s.image, s.id, cats, bcfg)
    write_results(args.out, records)
    print(f"wrote {len(records)} baseline detections for {len(samples)} images to {args.out}")


def cmd_plot(args, cfg) -> None:
    from .evaluation import read_pr_csv
    from .plotting import pr_svg

    paths = [p for p in args.pr.split(",") if p]
    labels = args.labels.split(",") if args.labels else []
    _echo("plot", {"pr": paths, "labels": labels, "title": args.title})
    curves = []
    for k, path in enumerate(paths):
        data = read_pr_csv(path)
        label = labels[k] if k < len(labels) else f"{Path(path).stem} (AP {data['ap']:.3f})"
        curves.append((label, data["recall"], data["precision"]))
    Path(args.out).write_text(pr_svg(curves, title=args.title))
    print(f"wrote {len(curves)} curves to {args.out}")


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "baseline": cmd_baseline, "plot": cmd_plot}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        cfg = load_config(getattr(args, "config", None))
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DecompError, OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
