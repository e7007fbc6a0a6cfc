"""Seeded oracle suites bundled behind ``voxcvae selftest``.

Each suite returns a :class:`SuiteResult`; the first failing case is kept
so a broken build points at something concrete.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nn
from .gradcheck import finite_diff_grad, max_rel_error
from .metrics import iou
from .model import kl_divergence
from .rng import Rng
from .tensor import Tensor, backward, sigmoid, tsum
from .train import AdamState, adam_step


@dataclass
class SuiteResult:
    name: str
    passed: bool
    cases: int
    failure: str | None = None

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        tail = f"  first failure: {self.failure}" if self.failure else ""
        return f"{status} {self.name} ({self.cases} cases){tail}"


def reference_conv3d_same(x: np.ndarray, k: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Plain loop over output voxels and taps; (D,H,W,Cin) input."""
    d, h, w, _ = x.shape
    out = np.zeros((d, h, w, k.shape[-1]))
    for i in range(d):
        for j in range(h):
            for l in range(w):
                acc = b.astype(np.float64).copy()
                for a in range(3):
                    for c in range(3):
                        for e in range(3):
                            ii, jj, ll = i + a - 1, j + c - 1, l + e - 1
                            if 0 <= ii < d and 0 <= jj < h and 0 <= ll < w:
                                acc += x[ii, jj, ll] @ k[a, c, e]
                out[i, j, l] = acc
    return out


def conv_suite(conv: Callable = nn.conv3d_same, probes: int = 50, tol: float = 1e-5, seed: int = 0) -> SuiteResult:
    rng = Rng(seed, 11)
    for p in range(probes):
        cin, cout = (int(v) for v in rng.integers(1, 4, size=2))
        x = rng.normal((5, 5, 5, cin), dtype=np.float64)
        k = rng.normal((3, 3, 3, cin, cout), dtype=np.float64)
        b = rng.normal((cout,), dtype=np.float64)
        got = conv(Tensor(x), Tensor(k), Tensor(b)).data
        err = float(np.max(np.abs(got - reference_conv3d_same(x, k, b))))
        if not err <= tol:
            return SuiteResult("conv", False, p + 1, f"probe {p}: max abs error {err:.3g}")
    return SuiteResult("conv", True, probes)


def _op_cases(rng: Rng):
    """(name, builder, input shapes) where builder maps input Tensors to a scalar."""
    w_dense = rng.normal((4, 3), dtype=np.float64)
    k3 = rng.normal((3, 3, 3, 2, 2), dtype=np.float64)
    k2 = rng.normal((4, 4, 2, 3), dtype=np.float64)
    mix = rng.normal((1, 4, 4, 4, 2), dtype=np.float64)
    stats = nn.BatchNormState(3, dtype=np.float64)
    target = (rng.uniform((2, 5)) > 0.5).astype(np.float64)
    return [
        ("dense", lambda x, b: tsum(sigmoid(nn.dense(x, Tensor(w_dense), b))), [(2, 4), (3,)]),
        ("conv3d_same", lambda x, b: tsum(nn.conv3d_same(x, Tensor(k3), b) * nn.conv3d_same(x, Tensor(k3), b)), [(1, 3, 3, 3, 2), (2,)]),
        ("conv2d", lambda x: tsum(sigmoid(nn.conv2d(x, Tensor(k2), Tensor(np.zeros(3)), stride=2, pad=1))), [(1, 6, 6, 2)]),
        ("maxpool3d", lambda x: tsum(nn.maxpool3d(x, pad_odd=True) * Tensor(mix[:, :2, :2, :2])), [(1, 4, 4, 3, 2)]),
        ("upsample3d", lambda x: tsum(nn.upsample3d(x) * Tensor(mix)), [(1, 2, 2, 2, 2)]),
        ("leaky_relu", lambda x: tsum(sigmoid(nn.leaky_relu(x, 0.1))), [(3, 4)]),
        ("batchnorm", lambda x, g: tsum(sigmoid(nn.batchnorm(x, g, Tensor(np.zeros(3)), stats, train=True))), [(4, 3), (3,)]),
        ("bce_with_logits", lambda x: nn.bce_with_logits(x, target), [(2, 5)]),
    ]


def gradient_suite(seeds: int = 3, tol: float = 1e-3, seed: int = 0) -> SuiteResult:
    cases = 0
    for s in range(seeds):
        rng = Rng(seed + s, 12)
        for name, fn, shapes in _op_cases(rng):
            arrays = [rng.normal(sh, dtype=np.float64) for sh in shapes]
            if name == "maxpool3d":
                arrays[0] = arrays[0] + np.arange(arrays[0].size).reshape(shapes[0]) * 0.05  # distinct values
            leaves = [Tensor(a, requires_grad=True) for a in arrays]
            grads = backward(fn(*leaves), wrt=leaves)
            for i, leaf in enumerate(leaves):
                def f(v, i=i):
                    vals = [Tensor(a) for a in arrays]
                    vals[i] = Tensor(v)
                    return fn(*vals).item()

                err = max_rel_error(grads[leaf], finite_diff_grad(f, arrays[i]))
                cases += 1
                if not err <= tol:
                    return SuiteResult("gradients", False, cases, f"{name} seed {seed + s} input {i}: rel error {err:.3g}")
    return SuiteResult("gradients", True, cases)


def kl_monte_carlo(mu: np.ndarray, log_var: np.ndarray, samples: int, rng: Rng) -> float:
    """E_q[log q(l) - log p(l)] estimated with ``samples`` draws from q."""
    sigma = np.exp(0.5 * log_var)
    z = rng.normal((samples, mu.size), dtype=np.float64)
    l = mu + sigma * z
    log_q = -0.5 * (z**2 + log_var + np.log(2 * np.pi))
    log_p = -0.5 * (l**2 + np.log(2 * np.pi))
    return float(np.mean(np.sum(log_q - log_p, axis=1)))


def kl_suite(pairs: int = 10, samples: int = 100_000, tol: float = 0.02, seed: int = 0) -> SuiteResult:
    zero = kl_divergence(Tensor(np.zeros(32)), Tensor(np.zeros(32))).item()
    if zero != 0.0:
        return SuiteResult("kl", False, 1, f"kl(0, 0) = {zero!r}")
    rng = Rng(seed, 13)
    for p in range(pairs):
        mu = rng.normal((32,), dtype=np.float64)
        log_var = rng.uniform((32,), -1.0, 1.0)
        exact = kl_divergence(Tensor(mu), Tensor(log_var)).item()
        est = kl_monte_carlo(mu, log_var, samples, rng.spawn(p))
        rel = abs(est - exact) / exact
        if not rel <= tol:
            return SuiteResult("kl", False, p + 2, f"pair {p}: analytic {exact:.5f} vs sampled {est:.5f}")
    return SuiteResult("kl", True, pairs + 1)


def iou_suite(probes: int = 100, seed: int = 0) -> SuiteResult:
    rng = Rng(seed, 14)
    for p in range(probes):
        e = int(rng.integers(1, 9))
        fill_a, fill_b = rng.uniform(), rng.uniform()
        a = rng.uniform((e, e, e)) < fill_a
        b = rng.uniform((e, e, e)) < fill_b
        inter = union = 0
        for va, vb in zip(a.ravel().tolist(), b.ravel().tolist()):
            inter += va and vb
            union += va or vb
        expected = 1.0 if union == 0 else inter / union
        got = iou(a, b)
        if got != expected or iou(b, a) != got:
            return SuiteResult("iou", False, p + 1, f"probe {p}: got {got!r}, counted {expected!r}")
    return SuiteResult("iou", True, probes)


def adam_suite() -> SuiteResult:
    p = Tensor(np.zeros(3), requires_grad=True)
    state = AdamState()
    adam_step({"p": p}, {"p": np.ones(3)}, state)
    expected = -state.lr / (1.0 + state.epsilon)
    if not np.allclose(p.data, expected, atol=1e-6, rtol=0):
        return SuiteResult("adam", False, 1, f"first step {p.data[0]!r}, expected {expected!r}")
    frozen = Tensor(np.arange(3.0), requires_grad=True)
    before = frozen.data.copy()
    still = AdamState(lr=0.0)
    for _ in range(5):
        adam_step({"q": frozen}, {"q": np.full(3, 0.7)}, still)
    if not np.array_equal(frozen.data, before):
        return SuiteResult("adam", False, 2, "lr=0 changed parameters")
    return SuiteResult("adam", True, 2)


SUITES: dict[str, Callable[[], SuiteResult]] = {
    "gradients": gradient_suite,
    "conv": conv_suite,
    "kl": kl_suite,
    "iou": iou_suite,
    "adam": adam_suite,
}


def run_all(overrides: dict[str, Callable[[], SuiteResult]] | None = None) -> list[SuiteResult]:
    suites = {**SUITES, **(overrides or {})}
    return [fn() for fn in suites.values()]
