"""Command-line entry point: ``voxcvae <command> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import selftest
from .checkpoint import load_checkpoint
from .metrics import binarize, diversity_eval, hypothesis_check, hypothesis_csv, iou_eval, make_schedule
from .model import ModelConfig
from .rng import Rng
from .synth import CLASS_NAMES, NUM_POSES, POSE_STEP, Dataset, build_dataset, class_id, render_ortho
from .tensor_io import FormatError, save_tnsr
from .train import TrainConfig, train, train_per_class

log = logging.getLogger("voxcvae")

PREVIEW_EXTENT = 128


class UsageError(Exception):
    pass


def _classes(text: str) -> list[str]:
    names = [c.strip() for c in text.split(",") if c.strip()]
    for n in names:
        if n not in CLASS_NAMES:
            raise argparse.ArgumentTypeError(f"unknown class {n!r} (choose from {', '.join(CLASS_NAMES)})")
    if not names:
        raise argparse.ArgumentTypeError("empty class list")
    return names


def _range(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'min,max', got {text!r}") from None
    return lo, hi


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return v


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value file; flags override it")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--profile", choices=("full", "tiny"), default="tiny")


def _schedule_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--schedule-count", type=int, default=10)
    p.add_argument("--schedule-range", type=_range, default=(-2.0, 2.0), help="min,max (write as --schedule-range=-2,2)")


def _eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint file, or a directory of cvae_<class>.ckpt files")
    p.add_argument("--data", type=Path, required=True, help="test split (.voxd)")
    p.add_argument("--classes", type=_classes, default=None)
    _schedule_flags(p)


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="voxcvae", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)
    cmds = {}

    p = cmds["gen-data"] = sub.add_parser("gen-data", help="generate a synthetic train/test dataset")
    _common(p)
    p.add_argument("--classes", type=_classes, default=list(CLASS_NAMES))
    p.add_argument("--per-class", type=_positive_int, default=50, help="objects per class")
    p.add_argument("--split", type=float, default=0.8, help="train fraction")
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = cmds["train"] = sub.add_parser("train", help="train a CVAE")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="training split (.voxd)")
    p.add_argument("--classes", type=_classes, default=None)
    p.add_argument("--per-class", type=_bool, nargs="?", const=True, default=False, help="one model per class")
    p.add_argument("--epochs", type=_positive_int, default=50)
    p.add_argument("--batch-size", type=_positive_int, default=16)
    p.add_argument("--kl-weight", type=float, default=1.0)
    p.add_argument("--recon-loss", choices=("bce", "mse"), default="bce")
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = cmds["predict"] = sub.add_parser("predict", help="decode one condition image")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--pose", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.0, help="scalar t; the latent is t times the unit all-ones direction")
    p.add_argument("--out", type=Path, required=True, help="probabilities (.tnsr)")

    p = cmds["eval-iou"] = sub.add_parser("eval-iou", help="IOU report over the noise schedule")
    _common(p)
    _eval_flags(p)
    p.add_argument("--out", type=Path, required=True, help="IOU CSV path")

    p = cmds["diversity"] = sub.add_parser("diversity", help="per-pose diversity and hypothesis reports")
    _common(p)
    _eval_flags(p)
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = cmds["render-preview"] = sub.add_parser("render-preview", help="write PGM previews of a grid or a prediction")
    _common(p)
    p.add_argument("--input", type=Path, required=True, help=".voxd file or a checkpoint")
    p.add_argument("--data", type=Path, help="dataset supplying the condition image when --input is a checkpoint")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--pose", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = cmds["selftest"] = sub.add_parser("selftest", help="run the bundled oracle suites")
    p.add_argument("--config", type=Path)
    return parser, cmds


def read_config(path: Path) -> dict[str, str]:
    items = {}
    for n, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        items[key.strip().replace("-", "_")] = value.strip()
    return items


def _apply_config(sub: argparse.ArgumentParser, items: dict[str, str]) -> None:
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    values = {}
    for key, raw in items.items():
        if key not in actions:
            raise UsageError(f"unknown config key {key!r}")
        a = actions[key]
        conv = a.type or str
        try:
            value = conv(raw)
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise UsageError(f"bad value for {key}: {exc}") from None
        if a.choices is not None and value not in a.choices:
            raise UsageError(f"{key} must be one of {', '.join(map(str, a.choices))}")
        values[key] = value
        a.required = False
    sub.set_defaults(**values)


def parse(argv: list[str] | None = None) -> argparse.Namespace:
    parser, cmds = build_parser()
    # find the command and config file first so the file can fill required flags
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config", type=Path)
    first, _ = pre.parse_known_args(argv)
    if first.config is None or first.command not in cmds:
        return parser.parse_args(argv)
    try:
        _apply_config(cmds[first.command], read_config(first.config))
    except OSError as exc:
        parser.error(f"cannot read config: {exc}")
    except UsageError as exc:
        parser.error(str(exc))
    return parser.parse_args(argv)


def _log_config(args: argparse.Namespace) -> None:
    resolved = {k: v for k, v in sorted(vars(args).items())}
    log.info("resolved config: %s", " ".join(f"{k}={_fmt(v)}" for k, v in resolved.items()))


def _fmt(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _filter(ds: Dataset, classes) -> Dataset:
    if not classes:
        return ds
    keep = np.isin(ds.class_ids, [class_id(c) for c in classes])
    return ds.select(np.nonzero(keep)[0])


def _load_models(path: Path, profile: str, classes_present: list[int]):
    if path.is_dir():
        return {CLASS_NAMES[c]: load_checkpoint(path / f"cvae_{CLASS_NAMES[c]}.ckpt", profile) for c in classes_present}
    return load_checkpoint(path, profile)


def cmd_gen_data(args) -> None:
    cfg = ModelConfig.for_profile(args.profile)
    if args.per_class < 2:
        raise ValueError("--per-class must be at least 2 to fill both splits")
    tr, te = build_dataset(args.classes, args.per_class, args.split, Rng(args.seed), cfg.voxel_extent, cfg.cond_image_extent, args.out)
    log.info("wrote %d train and %d test objects to %s", len(tr), len(te), args.out)


def cmd_train(args) -> None:
    ds = _filter(Dataset.load(args.data), args.classes)
    config = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        per_class=args.per_class,
        recon_loss=args.recon_loss,
        kl_weight=args.kl_weight,
        profile=args.profile,
        lr=args.lr,
    )
    if config.per_class:
        results = train_per_class(config, ds, out_dir=args.out)
        for name, res in results.items():
            log.info("%s: final loss %.6f -> %s", name, res.curve[-1].mean_loss, res.checkpoint)
    else:
        res = train(config, ds, out_dir=args.out)
        log.info("final loss %.6f -> %s", res.curve[-1].mean_loss, res.checkpoint)


def cmd_predict(args) -> None:
    model = load_checkpoint(args.checkpoint, args.profile)
    ds = Dataset.load(args.data)
    if not 0 <= args.index < len(ds) or not 0 <= args.pose < ds.poses:
        raise ValueError(f"index/pose out of range for {len(ds)} objects x {ds.poses} poses")
    eps = make_schedule(1, (args.noise, args.noise), latent_dim=model.config.latent_dim).values[0]
    probs = model.predict(ds.images[args.index, args.pose], eps)
    save_tnsr(probs, args.out)
    log.info("%d of %d voxels above 0.5 -> %s", int(binarize(probs).sum()), probs.data.size, args.out)


def _schedule(args, model_or_models):
    m = next(iter(model_or_models.values())) if isinstance(model_or_models, dict) else model_or_models
    return make_schedule(args.schedule_count, args.schedule_range, latent_dim=m.config.latent_dim)


def cmd_eval_iou(args) -> None:
    ds = _filter(Dataset.load(args.data), args.classes)
    models = _load_models(args.checkpoint, args.profile, ds.present_classes())
    report = iou_eval(models, ds, _schedule(args, models))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(report.to_csv())
    log.info("mean IOU %.6f -> %s", report.overall_mean, args.out)


def cmd_diversity(args) -> None:
    ds = _filter(Dataset.load(args.data), args.classes)
    models = _load_models(args.checkpoint, args.profile, ds.present_classes())
    report = diversity_eval(models, ds, _schedule(args, models))
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "diversity.csv").write_text(report.to_csv())
    (args.out / "hypothesis.csv").write_text(hypothesis_csv(hypothesis_check(report)))
    log.info("diversity and hypothesis reports -> %s", args.out)


def pgm_bytes(plane: np.ndarray) -> bytes:
    h, w = plane.shape
    pix = np.clip(np.rint(plane * 255.0), 0, 255).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes()


def write_previews(grid: np.ndarray, out: Path) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for p in range(NUM_POSES):
        img = render_ortho(grid, p * POSE_STEP, PREVIEW_EXTENT)
        for tag, ch in (("sil", 2), ("int", 0)):
            path = out / f"pose{p}_{tag}.pgm"
            path.write_bytes(pgm_bytes(img[..., ch]))
            paths.append(path)
    return paths


def cmd_render_preview(args) -> None:
    with open(args.input, "rb") as fh:
        magic = fh.read(4)
    if magic == b"CVAE":
        if args.data is None:
            raise ValueError("--data is required when --input is a checkpoint")
        model = load_checkpoint(args.input, args.profile)
        ds = Dataset.load(args.data)
        probs = model.predict(ds.images[args.index, args.pose], np.zeros(model.config.latent_dim))
        grid = binarize(probs)[..., 0]
    else:
        ds = Dataset.load(args.input)
        if not 0 <= args.index < len(ds):
            raise ValueError(f"index {args.index} out of range for {len(ds)} objects")
        grid = ds.voxels[args.index]
    paths = write_previews(grid, args.out)
    log.info("wrote %d previews to %s", len(paths), args.out)


def cmd_selftest(args) -> int:
    results = selftest.run_all()
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} suites passed")
    return 1 if failed else 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval-iou": cmd_eval_iou,
    "diversity": cmd_diversity,
    "render-preview": cmd_render_preview,
    "selftest": cmd_selftest,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        args = parse(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _log_config(args)
    try:
        return COMMANDS[args.command](args) or 0
    except (OSError, FormatError, ValueError, KeyError, FloatingPointError) as exc:
        print(f"voxcvae: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
