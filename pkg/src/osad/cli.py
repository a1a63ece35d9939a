"""``osad`` command-line entry point."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from osad.errors import ConfigError, DataError, OsadError

log = logging.getLogger("osad")


def _config(args):
    from osad.config import load_config, parse_settings

    return load_config(args.config, parse_settings(args.set))


def cmd_train(args) -> int:
    from osad.engine import train

    cfg = _config(args)
    result = train(cfg)
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    (Path(cfg.out) / "config.cfg").write_text(cfg.to_text())
    print(f"trained {len(result.log)} steps; final loss {result.log[-1]['loss']:.4f}" if result.log
          else "trained 0 steps")
    print(f"checkpoint: {Path(cfg.out) / 'last.safetensors'}")
    return 0


def cmd_evaluate(args) -> int:
    from osad.engine import evaluate

    cfg = _config(args)
    if args.checkpoint is None and not args.oracle:
        raise ConfigError("evaluate needs --checkpoint (or --oracle)")
    out = Path(args.out or cfg.out)
    report = evaluate(cfg, args.checkpoint, oracle=args.oracle, out_dir=out)
    means = report.means()
    print(",".join(["fold", *means]))
    print(",".join([str(cfg.fold), *(f"{v:.4f}" for v in means.values())]))
    print(f"report: {out}")
    return 0


def _list_images(directory: Path) -> list[Path]:
    from osad.data import IMAGE_SUFFIXES

    if not directory.is_dir():
        raise DataError("directory not found", directory)
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def cmd_predict(args) -> int:
    from osad.data import load_support_annotation, read_image
    from osad.engine import predict, write_predictions

    paths = _list_images(Path(args.queries))
    support = read_image(args.support)
    ann = load_support_annotation(args.ann)
    results = predict(support, ann, [read_image(p) for p in paths], args.checkpoint, threshold=args.threshold)
    written = write_predictions(results, [p.stem for p in paths], args.out)
    print(f"wrote {len(written)} files to {args.out}")
    return 0


def cmd_curves(args) -> int:
    from PIL import Image

    from osad.data import read_mask
    from osad.engine import write_report
    from osad.metrics import MetricReport, image_scores, threshold_curves

    gt_dir = Path(args.gt)
    preds, gts, report = [], [], MetricReport()
    maps = _list_images(Path(args.pred))
    if any(p.stem.endswith("_prob") for p in maps):  # output of `predict`: skip the binary masks
        maps = [p for p in maps if p.stem.endswith("_prob")]
    for p in maps:
        stem = p.stem[:-5] if p.stem.endswith("_prob") else p.stem
        g = gt_dir / f"{stem}.png"
        if not g.exists():
            raise DataError("no ground-truth mask for prediction", g)
        with Image.open(p) as im:
            prob = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
        mask = read_mask(g)
        if prob.shape != mask.shape:
            raise DataError(f"prediction {prob.shape} and mask {mask.shape} differ in size", p)
        report.add(stem, "", image_scores(prob, mask, args.threshold, args.beta))
        preds.append(prob)
        gts.append(mask)
    if not preds:
        raise DataError("no prediction maps found", Path(args.pred))
    report.curves = threshold_curves(preds, gts, args.beta)
    write_report(report, args.out)
    print(f"{len(preds)} maps scored; curves in {args.out}")
    return 0


def cmd_synth(args) -> int:
    from osad.data import SynthConfig, generate_synthetic_dataset

    cfg = SynthConfig(categories=args.categories, images_per_category=args.images, seed=args.seed,
                      image_size=args.size)
    index = generate_synthetic_dataset(cfg, args.out)
    print(f"{len(index.records)} images in {len(index.registry)} categories at {args.out}")
    return 0


def cmd_validate_folds(args) -> int:
    from osad.data import load_dataset, load_folds, padv2_registry, validate_fold_disjointness

    if args.dataset:
        registry = load_dataset(args.dataset).registry
    else:
        registry = padv2_registry()
    folds_dir = args.folds or (Path(args.dataset) / "folds" if args.dataset else None)
    if folds_dir is None:
        from importlib import resources

        folds_dir = resources.files("osad.resources").joinpath("folds")
    report = validate_fold_disjointness(load_folds(folds_dir, registry), registry)
    if report.is_empty():
        print("folds are category-disjoint and cover every category")
        return 0
    for line in report.lines():
        print(line)
    return 3


def cmd_sweep(args) -> int:
    from osad.engine import sweep

    cfg = _config(args)
    out = Path(args.out or Path(cfg.out) / "sweep")
    res = sweep(cfg, args.axis, args.values, out_dir=out)
    cols = [args.axis, "iou", "fbeta", "ephi", "cc", "mae"]
    print(",".join(cols))
    for row in res.rows:
        print(",".join(str(row[args.axis]) if c == args.axis else f"{row[c]:.4f}" for c in cols))
    if res.note:
        print(f"trend: {res.note}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="osad", description="One-shot affordance detection.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", default="desk", help="config file or profile name (desk, full)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    sp = sub.add_parser("train", help="episodic training")
    with_config(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="score a checkpoint on the fold's test split")
    with_config(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--out")
    sp.add_argument("--oracle", action="store_true", help="score ground truth against itself")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("predict", help="segment query images given one support")
    sp.add_argument("--support", required=True)
    sp.add_argument("--ann", required=True)
    sp.add_argument("--queries", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("curves", help="metrics and PR/F curves for saved maps")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--beta", type=float, default=0.3)
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.set_defaults(func=cmd_curves)

    sp = sub.add_parser("synth-data", help="write the synthetic dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--categories", type=int, default=4)
    sp.add_argument("--images", type=int, default=20, help="query images per category")
    sp.add_argument("--size", type=int, default=64)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("validate-folds", help="check category-disjoint folds")
    sp.add_argument("--folds")
    sp.add_argument("--dataset")
    sp.set_defaults(func=cmd_validate_folds)

    sp = sub.add_parser("sweep", help="train and evaluate across one ablation axis")
    with_config(sp)
    sp.add_argument("--axis", required=True, choices=("N", "K", "T", "similarity", "modules"))
    sp.add_argument("--values", nargs="+", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except OsadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
