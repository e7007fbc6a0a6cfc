"""Adam and the mini-batch training loop."""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .model import CVAE, ModelConfig
from .rng import Rng
from .synth import CLASS_NAMES, Dataset
from .tensor import Tensor, backward

log = logging.getLogger(__name__)

# sub-streams of a run's root Rng
INIT, SHUFFLE, NOISE, DROPOUT = 1, 2, 3, 4


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        dt = p.data.dtype.type
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= dt(state.beta1)
        m += dt(1.0 - state.beta1) * g
        v *= dt(state.beta2)
        v += dt(1.0 - state.beta2) * (g * g)
        m_hat = m / dt(bc1)
        v_hat = v / dt(bc2)
        p.data -= dt(state.lr) * m_hat / (np.sqrt(v_hat) + dt(state.epsilon))


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    seed: int = 0
    per_class: bool = False
    recon_loss: str = "bce"
    kl_weight: float = 1.0
    profile: str = "tiny"
    lr: float = 0.001

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")

    def model_config(self) -> ModelConfig:
        return ModelConfig.for_profile(self.profile, recon_loss=self.recon_loss, kl_weight=self.kl_weight)


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    mean_recon: float
    mean_kl: float


@dataclass
class TrainResult:
    model: CVAE
    curve: list[EpochStats]
    checkpoint: Path | None = None
    curve_path: Path | None = None


def curve_csv(curve: list[EpochStats]) -> str:
    lines = ["epoch,mean_loss,mean_recon,mean_kl"]
    lines += [f"{s.epoch},{s.mean_loss:.6f},{s.mean_recon:.6f},{s.mean_kl:.6f}" for s in curve]
    return "\n".join(lines) + "\n"


def train(
    config: TrainConfig,
    dataset: Dataset,
    model: CVAE | None = None,
    out_dir=None,
    tag: str = "cvae",
    stream: int = 0,
) -> TrainResult:
    """Fit a CVAE on every (object, pose) pair of ``dataset``.

    All randomness flows from ``Rng(config.seed, stream)``, so a run is a pure
    function of the config, the dataset contents and ``stream``.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    root = Rng(config.seed, stream)
    mcfg = config.model_config()
    if model is None:
        model = CVAE(mcfg, seed=config.seed, rng=root.spawn(INIT))
    if dataset.extent != model.config.voxel_extent or dataset.image_extent != model.config.cond_image_extent:
        raise ValueError(
            f"dataset extents (voxels {dataset.extent}, images {dataset.image_extent}) do not fit the "
            f"{model.config.profile} profile (voxels {model.config.voxel_extent}, images {model.config.cond_image_extent})"
        )
    shuffle, noise, drop = root.spawn(SHUFFLE), root.spawn(NOISE), root.spawn(DROPOUT)
    state = AdamState(lr=config.lr)
    params = model.params
    n_items = len(dataset) * dataset.poses
    latent = model.config.latent_dim
    curve: list[EpochStats] = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = shuffle.permutation(n_items)
        sums = np.zeros(3)
        for b, start in enumerate(range(0, n_items, config.batch_size)):
            idx = order[start : start + config.batch_size]
            obj, pose = idx // dataset.poses, idx % dataset.poses
            images = dataset.images[obj, pose]
            voxels = dataset.voxels[obj].astype(model.dtype)
            eps = noise.normal((len(idx), latent), dtype=model.dtype)
            terms, _ = model.loss(voxels, images, eps, train=True, rng=drop.spawn(step))
            values = [terms.total.item(), terms.recon.item(), terms.kl.item()]
            if not all(math.isfinite(v) for v in values):
                raise FloatingPointError(f"loss diverged at epoch {epoch}, batch {b}")
            if values[2] < 0:
                raise AssertionError(f"negative KL {values[2]} at epoch {epoch}, batch {b}")
            grads = backward(terms.total, wrt=list(params.values()))
            adam_step(params, {k: grads[p] for k, p in params.items()}, state)
            sums += np.array(values) * len(idx)
            step += 1
        mean = sums / n_items
        curve.append(EpochStats(epoch, *(float(v) for v in mean)))
        log.info("%s epoch %d/%d loss %.4f recon %.4f kl %.4f", tag, epoch, config.epochs, *mean)
    result = TrainResult(model, curve)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.checkpoint = out / f"{tag}.ckpt"
        result.curve_path = out / f"{tag}_loss.csv"
        save_checkpoint(model, result.checkpoint)
        result.curve_path.write_text(curve_csv(curve))
    return result


def max_workers() -> int:
    raw = os.environ.get("VOXCVAE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"VOXCVAE_THREADS must be an integer, got {raw!r}") from None


def _train_class(args):
    config, dataset, out_dir, cid = args
    res = train(config, dataset.of_class(cid), out_dir=out_dir, tag=f"cvae_{CLASS_NAMES[cid]}", stream=1 + cid)
    return cid, res


def train_per_class(config: TrainConfig, dataset: Dataset, out_dir=None) -> dict[str, TrainResult]:
    """One independent model per class present in ``dataset``."""
    classes = dataset.present_classes()
    if not classes:
        raise ValueError("cannot train on an empty dataset")
    jobs = [(config, dataset, out_dir, cid) for cid in classes]
    workers = min(max_workers(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            done = list(pool.map(_train_class, jobs))
    else:
        done = [_train_class(j) for j in jobs]
    return {CLASS_NAMES[cid]: res for cid, res in done}
