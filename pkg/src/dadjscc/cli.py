"""Command-line entry point: ``dadjscc {train,train-classifier,sweep,complexity,eval-single}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .channel import ChannelConfig
from .data import default_data_dir, load_cifar, take_subset, to_bytes
from .layers import compute_memory_mb, count_params
from .metrics import (DEFAULT_SWEEP, ClassifierProxy, MetricRecord, psnr, snr_sweep, ssim,
                      train_classifier_proxy)
from .models import (VARIANTS, CheckpointError, VariantSpec, build_model, end_to_end,
                     load_arrays, assign_arrays, load_checkpoint, save_arrays,
                     save_checkpoint)
from .training import TrainConfig, fit

log = logging.getLogger("dadjscc")

SWEEP_HEADER = "SNR_dB,PSNR_dB,SSIM,Accuracy_Percent"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _variant(name: str) -> str:
    v = name.lower().replace("-", "_")
    if v not in VARIANTS:
        raise argparse.ArgumentTypeError(f"choose from {', '.join(VARIANTS)}")
    return v


def _snr_list(text: str) -> list[float]:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad SNR list {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty SNR list")
    return vals


def _add_data_args(p):
    p.add_argument("--dataset", choices=("cifar10", "cifar100"), default="cifar10")
    p.add_argument("--data-dir", help="directory with CIFAR binary batches "
                                      "(default: $DADJSCC_DATA_DIR)")
    p.add_argument("--subset", type=int, help="class-stratified subset size")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dadjscc", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a codec variant")
    t.add_argument("--variant", type=_variant, default="da_djscc")
    t.add_argument("--c", type=int, default=4, help="bandwidth channels (c=4 gives k/n=1/12)")
    t.add_argument("--epochs", type=int, default=300)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--weight-decay", type=float, default=1e-5)
    t.add_argument("--train-snr", type=float, help="fixed training SNR (dB)")
    t.add_argument("--snr-min", type=float)
    t.add_argument("--snr-max", type=float)
    t.add_argument("--channel", choices=("awgn", "rayleigh"), default="awgn")
    t.add_argument("--out-dir", type=Path, required=True)
    t.add_argument("--resume", action="store_true")
    _add_data_args(t)

    tc = sub.add_parser("train-classifier", help="train the downstream classifier proxy")
    tc.add_argument("--epochs", type=int, default=10)
    tc.add_argument("--batch-size", type=int, default=32)
    tc.add_argument("--lr", type=float, default=1e-3)
    tc.add_argument("--out-dir", type=Path, required=True)
    _add_data_args(tc)

    s = sub.add_parser("sweep", help="PSNR/SSIM/accuracy versus evaluation SNR")
    s.add_argument("--checkpoint", type=Path, required=True,
                   help="checkpoint stem, e.g. runs/da/best")
    s.add_argument("--variant", type=_variant)
    s.add_argument("--c", type=int)
    s.add_argument("--classifier", type=Path, help="classifier checkpoint stem")
    s.add_argument("--snrs", type=_snr_list, default=list(DEFAULT_SWEEP))
    s.add_argument("--channel", choices=("awgn", "rayleigh"), default="awgn")
    s.add_argument("--out-dir", type=Path, required=True)
    _add_data_args(s)

    c = sub.add_parser("complexity", help="parameter count and memory per variant")
    c.add_argument("--c", type=int, default=4)

    e = sub.add_parser("eval-single", help="reconstruct one test image")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--variant", type=_variant)
    e.add_argument("--c", type=int)
    e.add_argument("--index", type=int, required=True)
    e.add_argument("--snr", type=float, required=True)
    e.add_argument("--channel", choices=("awgn", "rayleigh"), default="awgn")
    e.add_argument("--ppm", type=Path, help="write the reconstruction as a binary PPM")
    _add_data_args(e)
    return parser


# -- helpers --------------------------------------------------------------------

def _load_split(args, split: str):
    data_dir = default_data_dir(args.data_dir)
    if data_dir is None:
        raise UsageError("no data directory: pass --data-dir or set DADJSCC_DATA_DIR")
    ds = load_cifar(data_dir, args.dataset, split)
    if args.subset:
        ds = take_subset(ds, args.subset, np.random.default_rng([args.seed, 1]))
    return ds


def _train_channel(args) -> ChannelConfig:
    has_range = args.snr_min is not None or args.snr_max is not None
    if args.train_snr is not None and has_range:
        raise UsageError("--train-snr conflicts with --snr-min/--snr-max")
    if args.variant == "djscc" and args.train_snr is None:
        raise UsageError("djscc is trained at a fixed SNR; pass --train-snr")
    if args.train_snr is not None:
        return ChannelConfig.fixed(args.train_snr, mode=args.channel)
    lo = 0.0 if args.snr_min is None else args.snr_min
    hi = 25.0 if args.snr_max is None else args.snr_max
    if lo > hi:
        raise UsageError("--snr-min exceeds --snr-max")
    return ChannelConfig(mode=args.channel, snr_range=(lo, hi))


def _run_meta_path(checkpoint: Path) -> Path:
    return checkpoint.parent / "run.json"


def _spec_for(args) -> VariantSpec:
    meta_path = _run_meta_path(args.checkpoint)
    meta = json.loads(meta_path.read_text()) if meta_path.is_file() else {}
    variant = args.variant or meta.get("variant")
    c = args.c or meta.get("c")
    if variant is None or c is None:
        raise UsageError(f"cannot infer variant/c: pass --variant and --c (no {meta_path})")
    return VariantSpec(variant, int(c))


def _fmt(v: float) -> str:
    return f"{v:.6f}"


def format_sweep_csv(records: list[MetricRecord]) -> str:
    lines = [SWEEP_HEADER]
    for r in records:
        acc = "" if r.accuracy_percent is None else _fmt(r.accuracy_percent)
        lines.append(f"{r.snr_db:g},{_fmt(r.psnr_db)},{_fmt(r.ssim)},{acc}")
    return "\n".join(lines) + "\n"


def load_classifier(path: Path) -> ClassifierProxy:
    arrays = load_arrays(path)
    num_classes = arrays["classifier.fc2.bias"].shape[0] if "classifier.fc2.bias" in arrays \
        else None
    if num_classes is None:
        raise CheckpointError(f"{path} is not a classifier checkpoint")
    clf = ClassifierProxy(num_classes, np.random.default_rng(0))
    assign_arrays(clf.named_parameters(), arrays, f" in {path}")
    return clf


def write_ppm(path: Path, image: np.ndarray) -> None:
    """Binary P6 pixmap from a ``[3, H, W]`` unit-range image."""
    pix = to_bytes(np.transpose(image, (1, 2, 0)))
    h, w = pix.shape[:2]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())


# -- commands -------------------------------------------------------------------

def cmd_train(args) -> int:
    channel = _train_channel(args)
    spec = VariantSpec(args.variant, args.c, channel)
    cfg = TrainConfig(batch_size=args.batch_size, epochs=args.epochs, lr=args.lr,
                      weight_decay=args.weight_decay, seed=args.seed, channel=channel,
                      subset=args.subset)
    rng = np.random.default_rng(args.seed)
    model = build_model(spec, rng)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    (args.out_dir / "run.json").write_text(json.dumps(
        {"variant": spec.variant, "c": spec.c, "channel": channel.mode,
         "train_snr": channel.snr_db, "snr_range": channel.snr_range, "seed": args.seed,
         "epochs": args.epochs, "batch_size": args.batch_size, "lr": args.lr,
         "weight_decay": args.weight_decay, "dataset": args.dataset, "subset": args.subset},
        indent=2) + "\n")
    if args.epochs == 0 and not args.resume:
        save_checkpoint(model, args.out_dir / "initial")
        print("epochs=0: wrote initial checkpoint")
        return EXIT_OK
    ds = _load_split(args, "train")
    report = fit(model, ds, cfg, rng, args.out_dir, resume=args.resume)
    final = report.final_loss
    print(f"final mean loss: {final:.6f}" if final is not None else "no epochs run")
    return EXIT_OK


def cmd_train_classifier(args) -> int:
    cfg = TrainConfig(batch_size=args.batch_size, epochs=args.epochs, lr=args.lr,
                      weight_decay=0.0, seed=args.seed)
    train = _load_split(args, "train")
    test = load_cifar(default_data_dir(args.data_dir), args.dataset, "test")
    clf = train_classifier_proxy(train, cfg, np.random.default_rng(args.seed), test)
    save_arrays({n: p.data for n, p in clf.named_parameters().items()},
                args.out_dir / "classifier")
    print(f"clean test accuracy: {clf.clean_accuracy:.2f}%")
    return EXIT_OK


def cmd_sweep(args) -> int:
    spec = _spec_for(args)
    model = load_checkpoint(args.checkpoint, spec)
    clf = load_classifier(args.classifier) if args.classifier else None
    ds = _load_split(args, "test")
    records = snr_sweep(model, clf, ds, sorted(args.snrs), mode=args.channel, seed=args.seed)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    out = args.out_dir / "sweep.csv"
    out.write_text(format_sweep_csv(records))
    print(f"wrote {out}")
    return EXIT_OK


def complexity_rows(c: int) -> list[tuple[str, int, float]]:
    rows = []
    for v in VARIANTS:
        m = build_model(VariantSpec(v, c), np.random.default_rng(0))
        rows.append((v, count_params(m), compute_memory_mb(m)))
    return rows


def cmd_complexity(args) -> int:
    print(f"c={args.c} (k/n={VariantSpec('djscc', args.c).ratio})")
    print(f"{'variant':<10} {'parameters':>11} {'(M)':>7} {'memory_MB':>10}")
    for v, n, mb in complexity_rows(args.c):
        print(f"{v:<10} {n:>11d} {n / 1e6:>6.3f}M {mb:>10.3f}")
    return EXIT_OK


def cmd_eval_single(args) -> int:
    spec = _spec_for(args)
    model = load_checkpoint(args.checkpoint, spec)
    ds = _load_split(args, "test")
    if not 0 <= args.index < len(ds):
        raise UsageError(f"--index {args.index} out of range for {len(ds)} test images")
    image = ds.images[args.index]
    rng = np.random.default_rng(args.seed)
    recon, eff = end_to_end(model, image, ChannelConfig.fixed(args.snr, mode=args.channel), rng)
    print(f"index {args.index} snr {args.snr:g} dB (effective {eff:.2f}): "
          f"PSNR {psnr(recon, image):.4f} dB, SSIM {ssim(recon, image):.4f}")
    if args.ppm:
        write_ppm(args.ppm, recon.data)
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "train-classifier": cmd_train_classifier,
    "sweep": cmd_sweep,
    "complexity": cmd_complexity,
    "eval-single": cmd_eval_single,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"dadjscc {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, CheckpointError) as exc:
        print(f"dadjscc {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
