"""Conditional VAE for single-view voxel reconstruction.

Train graph: image -> condition embedding; (voxels, slab) -> encoder -> (mu,
log_var) -> reparameterized latent l; (l, condition vector) -> decoder ->
voxel logits. Test graph drops the encoder and feeds the noise draw straight
into the decoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import NamedTuple

import numpy as np

from . import nn
from .rng import Rng
from .tensor import Tensor, concat, exp, no_grad, reshape, sigmoid, square, tmean, tsum

PROFILES = ("full", "tiny")

# stream ids under the model seed
INIT_STREAM = 1


@dataclass(frozen=True)
class ModelConfig:
    profile: str = "full"
    voxel_extent: int = 32
    latent_dim: int = 32
    cond_image_extent: int = 128
    cond_channels: int = 4
    cond_slab_depth: int = 4
    encoder_channel_plan: tuple[int, ...] = (8, 64, 128, 256)
    encoder_dense_plan: tuple[int, ...] = (256, 128, 512)
    decoder_channel_plan: tuple[int, ...] = (256, 128, 16, 8, 1)
    decoder_dense: int = 256
    embed_channel_plan: tuple[int, ...] = (16, 16)
    alpha: float = 0.1
    dropout_rate: float = 0.2
    recon_loss: str = "bce"
    kl_weight: float = 1.0
    bn_momentum: float = 0.99
    bn_eps: float = 1e-3

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}; expected one of {PROFILES}")
        if self.latent_dim <= 0:
            raise ValueError("latent_dim must be positive")
        if self.recon_loss not in ("bce", "mse"):
            raise ValueError(f"recon_loss must be 'bce' or 'mse', got {self.recon_loss!r}")
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be non-negative")
        if self.voxel_extent % 8:
            raise ValueError("voxel_extent must be divisible by 8 (three 2x upsamplings)")
        if self.cond_image_extent != 4 * self.voxel_extent:
            raise ValueError("cond_image_extent must be 4 * voxel_extent (two stride-2 reductions)")
        b = self.bottleneck
        if self.decoder_dense % (b**3):
            raise ValueError(f"decoder_dense {self.decoder_dense} does not reshape to {b}^3 x C")
        if len(self.decoder_channel_plan) != 5 or len(self.encoder_channel_plan) != 4:
            raise ValueError("channel plans must keep the fixed layer count")

    @classmethod
    def for_profile(cls, profile: str = "full", **overrides) -> "ModelConfig":
        if profile == "tiny":
            base = cls()
            shrink = lambda plan: tuple(max(1, c // 8) for c in plan)  # noqa: E731
            kw = dict(
                profile="tiny",
                voxel_extent=base.voxel_extent // 2,
                cond_image_extent=base.cond_image_extent // 2,
                encoder_channel_plan=shrink(base.encoder_channel_plan),
                encoder_dense_plan=shrink(base.encoder_dense_plan),
                decoder_channel_plan=shrink(base.decoder_channel_plan),
                decoder_dense=base.decoder_dense // 8,
                embed_channel_plan=(8, 8),
            )
            kw.update(overrides)
            return cls(**kw)
        return cls(profile=profile, **overrides)

    @property
    def bottleneck(self) -> int:
        return self.voxel_extent // 8

    @property
    def decoder_reshape(self) -> tuple[int, int, int, int]:
        b = self.bottleneck
        return (b, b, b, self.decoder_dense // b**3)

    @property
    def encoder_input_shape(self) -> tuple[int, int, int, int]:
        e = self.voxel_extent
        return (e, e, e + self.cond_slab_depth, 1)

    @property
    def cond_vector_size(self) -> int:
        return self.voxel_extent**2 * self.cond_slab_depth

    def encoder_flat_size(self) -> int:
        sp = list(self.encoder_input_shape[:3])
        for _ in range(3):
            sp = [math.ceil(s / 2) for s in sp]
        return int(np.prod(sp)) * self.encoder_channel_plan[-1]

    def to_items(self) -> list[tuple[str, str]]:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append((f.name, ",".join(str(x) for x in v) if isinstance(v, tuple) else repr(v) if isinstance(v, float) else str(v)))
        return out

    @classmethod
    def from_items(cls, items: dict[str, str]) -> "ModelConfig":
        kw = {}
        for f in fields(cls):
            if f.name not in items:
                raise ValueError(f"config is missing key {f.name!r}")
            raw = items[f.name]
            default = f.default
            if isinstance(default, tuple):
                kw[f.name] = tuple(int(x) for x in raw.split(",")) if raw else ()
            elif isinstance(default, bool):
                kw[f.name] = raw == "True"
            elif isinstance(default, int):
                kw[f.name] = int(raw)
            elif isinstance(default, float):
                kw[f.name] = float(raw)
            else:
                kw[f.name] = raw
        unknown = set(items) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"config has unknown keys {sorted(unknown)}")
        return cls(**kw)


@dataclass
class LatentSample:
    mu: Tensor
    log_var: Tensor
    eps: Tensor
    l: Tensor


@dataclass
class ConditionEmbedding:
    slab: Tensor  # (N, E, E, slab_depth, 1), joins the encoder input
    vector: Tensor  # (N, E*E*slab_depth), joins the decoder input


class LossTerms(NamedTuple):
    total: Tensor
    recon: Tensor
    kl: Tensor


def kl_divergence(mu: Tensor, log_var: Tensor) -> Tensor:
    """KL(N(mu, exp(log_var)) || N(0, I)), summed over latent dims.

    Batched inputs (N, d) give the mean over the batch.
    """
    per = (square(mu) + exp(log_var) - 1.0 - log_var) * 0.5
    if mu.ndim == 1:
        return tsum(per)
    return tsum(per) / mu.shape[0]


def reparameterize(mu: Tensor, log_var: Tensor, eps) -> Tensor:
    """l = mu + exp(0.5 * log_var) * eps."""
    eps = eps if isinstance(eps, Tensor) else Tensor(eps, dtype=mu.dtype)
    return mu + exp(log_var * 0.5) * eps


def elbo_terms(
    logits: Tensor,
    target,
    mu: Tensor,
    log_var: Tensor,
    kl_weight: float = 1.0,
    recon_loss: str = "bce",
) -> LossTerms:
    target = np.asarray(target)
    if target.shape != logits.shape:
        raise ValueError(f"logits {logits.shape} and target {target.shape} disagree")
    if recon_loss == "bce":
        if not np.isin(target, (0, 1)).all():
            raise ValueError("bce reconstruction needs a binary target")
        recon = nn.bce_with_logits(logits, target)
    elif recon_loss == "mse":
        recon = tmean(square(sigmoid(logits) - Tensor(target, dtype=logits.dtype)))
    else:
        raise ValueError(f"unknown recon_loss {recon_loss!r}")
    kl = kl_divergence(mu, log_var)
    total = recon + kl * kl_weight
    return LossTerms(total, recon, kl)


def elbo_loss(logits, target, mu, log_var, kl_weight: float = 1.0, recon_loss: str = "bce") -> Tensor:
    """Negative ELBO: reconstruction term plus weighted KL to the unit Gaussian."""
    return elbo_terms(logits, target, mu, log_var, kl_weight, recon_loss).total


def _glorot(shape, rng: Rng, dtype) -> np.ndarray:
    if len(shape) == 2:
        fan_in, fan_out = shape
    else:
        receptive = int(np.prod(shape[:-2]))
        fan_in, fan_out = receptive * shape[-2], receptive * shape[-1]
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(shape, -bound, bound, dtype=np.float64).astype(dtype)


class CVAE:
    """Parameters live in ``params`` (name -> Tensor) and ``bn`` (name -> running stats)."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32, init: bool = True, rng: Rng | None = None):
        self.config = config
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.bn: dict[str, nn.BatchNormState] = {}
        self._build()
        if init:
            self._init_weights(rng if rng is not None else Rng(seed, INIT_STREAM))

    # -- construction -------------------------------------------------------

    def _param(self, name: str, shape) -> None:
        self.params[name] = Tensor(np.zeros(shape, dtype=self.dtype), requires_grad=True, name=name)

    def _conv(self, name, cin, cout, k=(3, 3, 3)):
        self._param(f"{name}.w", tuple(k) + (cin, cout))
        self._param(f"{name}.b", (cout,))

    def _dense(self, name, n, m):
        self._param(f"{name}.w", (n, m))
        self._param(f"{name}.b", (m,))

    def _bn(self, name, c):
        self._param(f"{name}.gamma", (c,))
        self._param(f"{name}.beta", (c,))
        self.bn[name] = nn.BatchNormState(c, self.dtype)

    def _build(self) -> None:
        c = self.config
        e1, e2 = c.embed_channel_plan
        self._conv("cond.conv1", c.cond_channels, e1, (3, 3))
        self._conv("cond.conv2", e1, e2, (3, 3))
        self._conv("cond.proj", e2, c.cond_slab_depth, (1, 1))

        ch = c.encoder_channel_plan
        self._conv("enc.conv1", 1, ch[0])
        self._conv("enc.conv2", ch[0], ch[1])
        self._bn("enc.bn2", ch[1])
        self._conv("enc.conv3", ch[1], ch[2])
        self._bn("enc.bn3", ch[2])
        self._conv("enc.conv4", ch[2], ch[3])
        d1, d2, d3 = c.encoder_dense_plan
        self._dense("enc.dense1", c.encoder_flat_size(), d1)
        self._bn("enc.bn_dense1", d1)
        self._dense("enc.dense2", d1, d2)
        self._dense("enc.dense3", d2, d3)
        self._dense("enc.mu", d3, c.latent_dim)
        self._dense("enc.log_var", d3, c.latent_dim)

        self._dense("dec.dense1", c.latent_dim + c.cond_vector_size, c.decoder_dense)
        self._bn("dec.bn_dense1", c.decoder_dense)
        cin = c.decoder_reshape[-1]
        for i, cout in enumerate(c.decoder_channel_plan, start=1):
            self._conv(f"dec.conv{i}", cin, cout)
            cin = cout

    def _init_weights(self, rng: Rng) -> None:
        for i, (name, p) in enumerate(self.params.items()):
            if name.endswith(".w"):
                p.data[...] = _glorot(p.shape, rng.spawn(i), self.dtype)
            elif name.endswith(".gamma"):
                p.data[...] = 1.0

    def astype(self, dtype) -> "CVAE":
        """Copy of the model with parameters and running stats cast to ``dtype``."""
        other = object.__new__(CVAE)
        other.config, other.seed, other.dtype = self.config, self.seed, np.dtype(dtype)
        other.params = {
            k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.params.items()
        }
        other.bn = {k: v.astype(dtype) for k, v in self.bn.items()}
        return other

    def parameter_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(k, v.shape) for k, v in self.params.items()]

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    # -- layers ---------------------------------------------------------------

    def _p(self, name):
        return self.params[name]

    def _conv3(self, x, name):
        return nn.conv3d_same(x, self._p(f"{name}.w"), self._p(f"{name}.b"))

    def _lin(self, x, name):
        return nn.dense(x, self._p(f"{name}.w"), self._p(f"{name}.b"))

    def _norm(self, x, name, train):
        c = self.config
        return nn.batchnorm(
            x, self._p(f"{name}.gamma"), self._p(f"{name}.beta"), self.bn[name], train,
            momentum=c.bn_momentum, eps=c.bn_eps,
        )

    def _act(self, x):
        return nn.leaky_relu(x, self.config.alpha)

    # -- graph pieces ---------------------------------------------------------

    def embed_condition(self, images) -> ConditionEmbedding:
        """Map (N, I, I, C) images to a (N, E, E, S, 1) slab and its flattening."""
        c = self.config
        images = images if isinstance(images, Tensor) else Tensor(images, dtype=self.dtype)
        want = (c.cond_image_extent, c.cond_image_extent, c.cond_channels)
        if images.ndim != 4 or images.shape[1:] != want:
            raise ValueError(f"condition images must be (N, {want[0]}, {want[1]}, {want[2]}), got {images.shape}")
        h = self._act(nn.conv2d(images, self._p("cond.conv1.w"), self._p("cond.conv1.b"), stride=2, pad=1))
        h = self._act(nn.conv2d(h, self._p("cond.conv2.w"), self._p("cond.conv2.b"), stride=2, pad=1))
        h = nn.conv2d(h, self._p("cond.proj.w"), self._p("cond.proj.b"))
        n, e = h.shape[0], c.voxel_extent
        slab = reshape(h, (n, e, e, c.cond_slab_depth, 1))
        return ConditionEmbedding(slab=slab, vector=reshape(h, (n, c.cond_vector_size)))

    def encode(self, voxels, cond: ConditionEmbedding, train: bool = False, rng: Rng | None = None):
        """Encoder stack on concat(voxels, slab); returns (mu, log_var)."""
        c = self.config
        voxels = voxels if isinstance(voxels, Tensor) else Tensor(voxels, dtype=self.dtype)
        e = c.voxel_extent
        if voxels.ndim != 5 or voxels.shape[1:] != (e, e, e, 1):
            raise ValueError(f"voxels must be (N, {e}, {e}, {e}, 1), got {voxels.shape}")
        if cond.slab.shape[0] != voxels.shape[0]:
            raise ValueError("voxel and condition batch sizes differ")
        x = concat([voxels, cond.slab], axis=3)
        x = nn.maxpool3d(self._act(self._conv3(x, "enc.conv1")), pad_odd=True)
        x = self._act(self._conv3(x, "enc.conv2"))
        x = nn.maxpool3d(self._norm(x, "enc.bn2", train), pad_odd=True)
        x = self._act(self._conv3(x, "enc.conv3"))
        x = nn.maxpool3d(self._norm(x, "enc.bn3", train), pad_odd=True)
        x = nn.flatten(self._conv3(x, "enc.conv4"))
        x = self._norm(self._act(self._lin(x, "enc.dense1")), "enc.bn_dense1", train)
        x = nn.dropout(x, c.dropout_rate, train, rng)
        x = self._act(self._lin(x, "enc.dense2"))
        x = self._lin(x, "enc.dense3")
        return self._lin(x, "enc.mu"), self._lin(x, "enc.log_var")

    def decode(self, l, cond: ConditionEmbedding, train: bool = False, rng: Rng | None = None) -> Tensor:
        """Decoder stack on concat(l, condition vector); returns (N, E, E, E, 1) logits."""
        c = self.config
        l = l if isinstance(l, Tensor) else Tensor(l, dtype=self.dtype)
        x = concat([l, cond.vector], axis=1)
        x = self._norm(self._act(self._lin(x, "dec.dense1")), "dec.bn_dense1", train)
        x = nn.dropout(x, c.dropout_rate, train, rng)
        x = reshape(x, (x.shape[0],) + c.decoder_reshape)
        x = nn.upsample3d(self._act(self._conv3(x, "dec.conv1")))
        x = nn.upsample3d(self._act(self._conv3(x, "dec.conv2")))
        x = nn.upsample3d(self._act(self._conv3(x, "dec.conv3")))
        x = self._act(self._conv3(x, "dec.conv4"))
        return self._conv3(x, "dec.conv5")

    # -- train / test graphs ------------------------------------------------

    def loss(self, voxels, images, eps, train: bool = True, rng: Rng | None = None):
        """Training graph; returns (LossTerms, LatentSample).

        ``voxels`` is (N, E, E, E) or (N, E, E, E, 1) binary, ``eps`` (N, latent).
        """
        c = self.config
        vox = np.asarray(voxels)
        if vox.ndim == 4:
            vox = vox[..., None]
        cond = self.embed_condition(images)
        mu, log_var = self.encode(Tensor(vox, dtype=self.dtype), cond, train, rng.spawn(0) if rng else None)
        eps_t = eps if isinstance(eps, Tensor) else Tensor(eps, dtype=self.dtype)
        l = reparameterize(mu, log_var, eps_t)
        logits = self.decode(l, cond, train, rng.spawn(1) if rng else None)
        terms = elbo_terms(logits, vox, mu, log_var, c.kl_weight, c.recon_loss)
        return terms, LatentSample(mu, log_var, eps_t, l)

    def predict(self, images, eps) -> Tensor:
        """Eval-mode decoder output sigmoid(decode(eps, embed(image))), encoder unused."""
        images = np.asarray(images.data if isinstance(images, Tensor) else images)
        eps = np.asarray(eps.data if isinstance(eps, Tensor) else eps)
        single = images.ndim == 3
        if single:
            images = images[None]
        if eps.ndim == 1:
            eps = np.broadcast_to(eps, (images.shape[0], eps.shape[0]))
        with no_grad():
            cond = self.embed_condition(images.astype(self.dtype))
            probs = sigmoid(self.decode(eps.astype(self.dtype), cond, train=False))
        return Tensor(probs.data[0]) if single else probs

    def predict_schedule(self, images, eps_values) -> np.ndarray:
        """Probabilities (K, N, E, E, E) for every schedule entry, sharing one embedding.

        Each schedule entry decodes the same batch layout, so decodings that
        do not depend on the latent are bitwise identical across entries.
        """
        images = np.asarray(images, dtype=self.dtype)
        n = images.shape[0]
        out = []
        with no_grad():
            cond = self.embed_condition(images)
            for eps in eps_values:
                l = np.ascontiguousarray(np.broadcast_to(np.asarray(eps, dtype=self.dtype), (n, self.config.latent_dim)))
                out.append(sigmoid(self.decode(l, cond, train=False)).data[..., 0])
        return np.stack(out)

