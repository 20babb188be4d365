"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 I/O or data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import augment, dedup, episodic, losses, metrics, netcost, protohead
from .core import (
    DEFAULT_SEED,
    MASK_SUFFIX,
    NUM_CLASSES,
    DatasetError,
    derive_seed,
    load_ciw,
    load_dataset,
    read_mask,
    rng_for,
    save_dataset,
    write_mask,
)
from .dli import InjectionConfig, harvest_defect_free, inject_batch, write_injection_report

log = logging.getLogger("segforge")

EXIT_USAGE = 1
EXIT_DATA = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse exits 2 by default
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def default_seed() -> int:
    raw = os.environ.get("SEGFORGE_SEED")
    if raw is None or raw == "":
        return DEFAULT_SEED
    try:
        return int(raw, 0)
    except ValueError:
        raise UsageError(f"SEGFORGE_SEED is not an integer: {raw!r}") from None


def _sizes(text: str) -> list[tuple[int, int]]:
    out = []
    for part in text.split(","):
        h, _, w = part.strip().lower().partition("x")
        try:
            out.append((int(h), int(w or h)))
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad size {part!r}, expected HxW") from None
    return out


# --------------------------------------------------------------------------
# mask directories

def _mask_files(root: Path) -> dict[str, Path]:
    """Map id -> mask path. Uses ``<id>_mask.png`` when present, else every ``<id>.png``."""
    if not root.is_dir():
        raise FileNotFoundError(f"directory not found: {root}")
    suffixed = sorted(root.glob(f"*{MASK_SUFFIX}.png"))
    if suffixed:
        return {p.stem[: -len(MASK_SUFFIX)]: p for p in suffixed}
    return {p.stem: p for p in sorted(root.glob("*.png"))}


# --------------------------------------------------------------------------
# commands

def cmd_dedup(args: argparse.Namespace) -> int:
    train = load_dataset(args.train, None)
    test = load_dataset(args.test, None)
    result = dedup.dedup_filter(train, test, args.threshold, args.intra_train)
    out = Path(args.out)
    save_dataset(out, result.kept)
    report = Path(args.report) if args.report else out / "dedup_report.csv"
    dedup.write_report(report, result.removed)
    print(f"kept {len(result.kept)} of {len(train)}; removed {len(result.removed)}")
    return 0


def cmd_augment(args: argparse.Namespace) -> int:
    data = load_dataset(args.input, None)
    if not data:
        raise DatasetError(f"no samples in {args.input}")
    if args.pipeline == "standard":
        specs = list(augment.STANDARD_PIPELINE)
    else:
        specs = augment.load_pipeline(args.pipeline)
    result = augment.run_pipeline(data, specs, args.seed, args.jobs)
    save_dataset(args.out, result)
    print(f"{len(data)} -> {len(result)} samples")
    return 0


def cmd_harvest(args: argparse.Namespace) -> int:
    data = load_dataset(args.input, None)
    patches = harvest_defect_free(data, args.sizes, args.attempts, args.seed)
    save_dataset(args.out, patches)
    print(f"harvested {len(patches)} defect-free patches")
    return 0


def cmd_batches(args: argparse.Namespace) -> int:
    """Shuffle ids with the seed and cut them into fixed-size batches."""
    data = load_dataset(args.data, None)
    ids = [s.id for s in data]
    order = rng_for(args.seed, "batches").permutation(len(ids))
    ids = [ids[i] for i in order]
    batches = [ids[i:i + args.batch_size] for i in range(0, len(ids), args.batch_size)]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data_dir = os.path.relpath(Path(args.data).resolve(), out.parent.resolve())
    doc = {"data_dir": Path(data_dir).as_posix(), "seed": args.seed, "batches": batches}
    out.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    print(f"{len(batches)} batches")
    return 0


def _read_batches(path: Path) -> tuple[Path, list[list[str]]]:
    doc = json.loads(path.read_text(encoding="utf-8"))
    if "batches" not in doc or "data_dir" not in doc:
        raise DatasetError(f"{path}: batches manifest needs 'data_dir' and 'batches'")
    data_dir = Path(doc["data_dir"])
    if not data_dir.is_absolute():
        data_dir = path.parent / data_dir
    return data_dir, [list(b) for b in doc["batches"]]


def cmd_inject(args: argparse.Namespace) -> int:
    data_dir, batches = _read_batches(Path(args.batches))
    sources = load_dataset(args.source, None)
    config = InjectionConfig(p_poisson=args.p_poisson, mask_dilation_kernel=args.dilation)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for b, ids in enumerate(batches):
        batch = load_dataset(data_dir, None, manifest=ids)
        by_id = {s.id: s for s in batch}
        batch = [by_id[i] for i in ids]
        seed = derive_seed(args.seed, "batch", b)
        result = inject_batch(batch, sources, config, seed=seed, num_classes=args.classes)
        save_dataset(out / f"batch_{b:04d}", result.batch)
        rows.extend((b, rec) for rec in result.records)
    report = Path(args.report) if args.report else out / "injection_report.csv"
    write_injection_report(report, rows)
    print(f"{len(rows)} injections over {len(batches)} batches")
    return 0


def cmd_episode(args: argparse.Namespace) -> int:
    data = load_dataset(args.data, None)
    episodes = list(episodic.episode_stream(
        data, args.n, args.k, args.episodes, args.seed, queries_per_class=args.queries,
    ))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    episodic.write_episode_manifest(out, episodes, args.seed)
    print(f"{len(episodes)} episodes, {args.n}-way {args.k}-shot")
    return 0


def cmd_features(args: argparse.Namespace) -> int:
    data = load_dataset(args.data, None)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for s in data:
        if args.mode == "label":
            rng = rng_for(args.seed, s.id, "features")
            feats = protohead.label_features(s.mask, args.dim, noise=args.noise, rng=rng)
        else:
            feats = protohead.image_features(s.image, args.stride)
        protohead.write_feature_map(out / f"{s.id}.feat", feats)
    print(f"wrote {len(data)} feature maps")
    return 0


def cmd_protohead(args: argparse.Namespace) -> int:
    episodes = episodic.read_episode_manifest(args.manifest)
    feat_dir = Path(args.features)
    data_dir = Path(args.data)
    out = Path(args.out)
    pred_dir, gt_dir = out / "pred", out / "gt"
    pred_dir.mkdir(parents=True, exist_ok=True)
    gt_dir.mkdir(parents=True, exist_ok=True)
    cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def load(sid: str) -> tuple[np.ndarray, np.ndarray]:
        if sid not in cache:
            path = feat_dir / f"{sid}.feat"
            if not path.is_file():
                raise DatasetError(f"missing feature file for {sid!r}")
            cache[sid] = (
                protohead.read_feature_map(path),
                read_mask(data_dir / f"{sid}{MASK_SUFFIX}.png"),
            )
        return cache[sid]

    lines = ["episode,loss_query,loss_support,loss_total,skipped"]
    for e, ep in enumerate(episodes):
        classes = sorted({0, *ep["classes"]})
        sup_ids = [i for entry in ep["support"] for i in entry["ids"]]
        qry_ids = [entry["id"] for entry in ep["query"]]
        sf, sm = zip(*(load(i) for i in sup_ids))
        qf, qm = zip(*(load(i) for i in qry_ids))
        sm = [protohead.remap_to_episode(m, classes) for m in sm]
        qm = [protohead.remap_to_episode(m, classes) for m in qm]
        res = protohead.bidirectional_round(sf, sm, qf, qm, classes, args.alpha)
        for qid, seg, gt in zip(qry_ids, res.query, qm):
            stem = f"ep{e:04d}_{qid}"
            write_mask(pred_dir / f"{stem}{MASK_SUFFIX}.png", seg.mask)
            write_mask(gt_dir / f"{stem}{MASK_SUFFIX}.png", protohead.resize_mask(gt, seg.mask.shape))
        skipped = " ".join(str(c) for c in res.skipped_classes)
        lines.append(f"{e},{res.loss_query:.9g},{res.loss_support:.9g},{res.loss_total:.9g},{skipped}")
    (out / "losses.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"{len(episodes)} episodes segmented")
    return 0


def cmd_metrics(args: argparse.Namespace) -> int:
    preds = _mask_files(Path(args.pred))
    gts = _mask_files(Path(args.gt))
    if not gts:
        raise DatasetError(f"no ground-truth masks in {args.gt}")
    totals = metrics.ConfusionTotals(args.classes)
    loss_sums = np.zeros(3)
    for sid in sorted(gts):
        if sid not in preds:
            raise DatasetError(f"missing prediction for {sid!r}")
        pred = read_mask(preds[sid], args.classes)
        gt = read_mask(gts[sid], args.classes)
        metrics.accumulate_confusion(pred, gt, args.classes, totals)
        if args.loss:
            probs = losses.one_hot(pred, args.classes + 1)
            loss_sums += (
                losses.cross_entropy(probs, gt),
                losses.dice_loss(probs, gt),
                losses.focal_loss(probs, gt),
            )
    ciw = load_ciw(args.ciw) if args.ciw else None
    report = metrics.report_from_totals(totals, ciw)
    if args.loss:
        ce, dice, focal = loss_sums / len(gts)
        report.extra.update({
            "loss_ce": ce, "loss_dice": dice, "loss_focal": focal,
            "loss_combined": losses.combine_losses(ce, dice, focal),
        })
    sys.stdout.write(report.to_text())
    if args.csv:
        Path(args.csv).write_text(report.to_csv(), encoding="utf-8")
    return 0


def cmd_cost(args: argparse.Namespace) -> int:
    layers = netcost.load_layer_specs(args.config)
    sys.stdout.write(netcost.cost_table(layers, args.bias))
    return 0


# --------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="master seed (default: $SEGFORGE_SEED or 42)")
    common.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                        help="worker threads (results do not depend on it)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="segforge", description="Deterministic defect-segmentation data toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("dedup", parents=[common], help="drop train images near-duplicating test images")
    p.add_argument("train")
    p.add_argument("test")
    p.add_argument("out")
    p.add_argument("--threshold", type=int, default=7)
    p.add_argument("--report", help="CSV path (default: OUT/dedup_report.csv)")
    p.add_argument("--intra-train", action="store_true")
    p.set_defaults(func=cmd_dedup)

    p = sub.add_parser("augment", parents=[common], help="offline image/mask augmentation")
    p.add_argument("input")
    p.add_argument("out")
    p.add_argument("--pipeline", default="standard", help="'standard' or a JSON transform list")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("harvest", parents=[common], help="crop defect-free patches")
    p.add_argument("input")
    p.add_argument("out")
    p.add_argument("--sizes", type=_sizes, default=[(100, 100), (90, 90), (80, 80)])
    p.add_argument("--attempts", type=int, default=10)
    p.set_defaults(func=cmd_harvest)

    p = sub.add_parser("batches", parents=[common], help="write a shuffled batches manifest")
    p.add_argument("data")
    p.add_argument("out")
    p.add_argument("--batch-size", type=int, default=8)
    p.set_defaults(func=cmd_batches)

    p = sub.add_parser("inject", parents=[common], help="dynamic label injection over batches")
    p.add_argument("batches")
    p.add_argument("source")
    p.add_argument("out")
    p.add_argument("--p-poisson", type=float, default=0.5)
    p.add_argument("--dilation", type=int, default=3)
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--report", help="CSV path (default: OUT/injection_report.csv)")
    p.set_defaults(func=cmd_inject)

    p = sub.add_parser("episode", parents=[common], help="sample n-way k-shot episodes")
    p.add_argument("data")
    p.add_argument("out")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--episodes", type=int, default=1000)
    p.add_argument("--queries", type=int, default=1)
    p.set_defaults(func=cmd_episode)

    p = sub.add_parser("features", parents=[common], help="write feature maps for a dataset")
    p.add_argument("data")
    p.add_argument("out")
    p.add_argument("--mode", choices=("label", "image"), default="image",
                   help="'label' gives orthogonal per-label codes (fixtures only)")
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--stride", type=int, default=1)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("protohead", parents=[common], help="prototype segmentation of episodes")
    p.add_argument("manifest")
    p.add_argument("features")
    p.add_argument("data")
    p.add_argument("out")
    p.add_argument("--alpha", type=float, default=protohead.DEFAULT_ALPHA)
    p.set_defaults(func=cmd_protohead)

    p = sub.add_parser("metrics", parents=[common], help="evaluate predicted masks")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--classes", type=int, default=NUM_CLASSES)
    p.add_argument("--ciw", help="JSON class importance weights")
    p.add_argument("--csv", help="also write a CSV report here")
    p.add_argument("--loss", action="store_true", help="add losses of one-hot predictions")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("cost", parents=[common], help="parameter counts for a layer spec")
    p.add_argument("config")
    p.add_argument("--bias", action="store_true")
    p.set_defaults(func=cmd_cost)
    return parser


def _validate(parser: argparse.ArgumentParser, args: argparse.Namespace) -> None:
    def positive(name: str) -> None:
        if getattr(args, name, 1) is not None and getattr(args, name, 1) < 1:
            parser.error(f"--{name.replace('_', '-')} must be >= 1")

    for name in ("jobs", "attempts", "batch_size", "n", "k", "episodes", "queries", "dim", "stride"):
        positive(name)
    if args.command == "dedup" and not 0 <= args.threshold <= 64:
        parser.error("--threshold must be in [0, 64]")
    if args.command == "inject":
        if not 0.0 <= args.p_poisson <= 1.0:
            parser.error("--p-poisson must be in [0, 1]")
        if args.dilation < 1 or args.dilation % 2 == 0:
            parser.error("--dilation must be odd and >= 1")
    if args.command == "protohead" and not args.alpha > 0:
        parser.error("--alpha must be positive")
    if args.command == "metrics" and args.classes < 1:
        parser.error("--classes must be >= 1")
    if args.command == "harvest" and any(h < 1 or w < 1 for h, w in args.sizes):
        parser.error("--sizes must be positive")


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.seed is None:
            args.seed = default_seed()
    except UsageError as exc:
        print(f"segforge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    _validate(parser, args)
    try:
        return args.func(args)
    except (DatasetError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"segforge {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
