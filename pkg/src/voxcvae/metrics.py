"""Shape metrics and the fixed-noise evaluation protocols.

A *run* is one decoding of the whole test set with a single entry of the
noise schedule. Spread across runs measures how much the prediction depends
on the latent draw once the condition is fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.stats import rankdata

from .synth import CLASS_NAMES, NUM_POSES, Dataset
from .tensor import Tensor


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def binarize(probs, threshold: float = 0.5) -> np.ndarray:
    """Occupancy where ``probs > threshold`` (strictly)."""
    return (_arr(probs) > threshold).astype(np.uint8)


def iou(a, b) -> float:
    """|a & b| / |a | b| over occupied voxels; two empty grids score 1.0."""
    a, b = _arr(a).astype(bool), _arr(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"iou extents differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def mse(a, b) -> float:
    a, b = _arr(a).astype(np.float64), _arr(b).astype(np.float64)
    if a.shape != b.shape:
        raise ValueError(f"mse extents differ: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def _std(x: np.ndarray, axis=0) -> np.ndarray:
    # shifting by the first entry makes identical entries give exactly 0
    x = np.asarray(x, dtype=np.float64)
    first = np.take(x, [0], axis=axis)
    return np.std(x - first, axis=axis)


@dataclass(frozen=True)
class NoiseSchedule:
    """``count`` latent vectors ``t_k * u`` with ``t_k`` evenly spaced over ``t_range``."""

    count: int
    t_range: tuple[float, float]
    direction: tuple[float, ...]
    scalars: tuple[float, ...]
    values: tuple[np.ndarray, ...] = field(compare=False)

    def __len__(self) -> int:
        return self.count


def make_schedule(count: int = 10, t_range=(-2.0, 2.0), direction=None, latent_dim: int = 32) -> NoiseSchedule:
    if count < 1:
        raise ValueError("schedule count must be at least 1")
    t_min, t_max = (float(t) for t in t_range)
    if count > 1 and t_min == t_max:
        raise ValueError("schedule range is degenerate")
    u = np.ones(latent_dim) if direction is None else np.asarray(direction, dtype=np.float64)
    if u.shape != (latent_dim,):
        raise ValueError(f"direction must have {latent_dim} entries")
    norm = np.linalg.norm(u)
    if norm == 0:
        raise ValueError("direction must be nonzero")
    u = u / norm
    if count == 1:
        scalars = [t_min]
    else:
        scalars = [t_min + k * (t_max - t_min) / (count - 1) for k in range(count)]
    values = tuple((t * u).astype(np.float32) for t in scalars)
    return NoiseSchedule(count, (t_min, t_max), tuple(float(x) for x in u), tuple(scalars), values)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class DiversityRow:
    class_name: str
    pose: int
    mean_mse: float
    std_mse: float
    voxelwise_std: float


@dataclass
class DiversityReport:
    rows: list[DiversityRow]

    def classes(self) -> list[str]:
        return list(dict.fromkeys(r.class_name for r in self.rows))

    def for_class(self, name: str) -> list[DiversityRow]:
        return [r for r in self.rows if r.class_name == name]

    def best_pose(self, name: str) -> int:
        rows = self.for_class(name)
        return rows[int(np.argmin([r.mean_mse for r in rows]))].pose

    def to_csv(self) -> str:
        lines = ["class,pose,mean_mse,std_mse,voxelwise_std,is_best_pose"]
        for name in self.classes():
            best = self.best_pose(name)
            for r in self.for_class(name):
                lines.append(
                    f"{name},{r.pose},{r.mean_mse:.6f},{r.std_mse:.6f},{r.voxelwise_std:.6f},{int(r.pose == best)}"
                )
        return "\n".join(lines) + "\n"


@dataclass
class IOURow:
    class_name: str
    mean_iou: float
    std_iou: float


@dataclass
class IOUReport:
    rows: list[IOURow]

    @property
    def overall_mean(self) -> float:
        return float(np.mean([r.mean_iou for r in self.rows]))

    @property
    def overall_std(self) -> float:
        return float(np.mean([r.std_iou for r in self.rows]))

    def to_csv(self) -> str:
        lines = ["class,mean_iou,std_iou"]
        lines += [f"{r.class_name},{r.mean_iou:.6f},{r.std_iou:.6f}" for r in self.rows]
        lines.append(f"mean,{self.overall_mean:.6f},{self.overall_std:.6f}")
        return "\n".join(lines) + "\n"


@dataclass
class HypothesisRow:
    class_name: str
    best_pose: int
    std_rank_of_best: float
    spearman_rho: float


def hypothesis_csv(rows: list[HypothesisRow]) -> str:
    lines = ["class,best_pose,std_rank_of_best,spearman_rho"]
    lines += [f"{r.class_name},{r.best_pose},{r.std_rank_of_best:.6f},{r.spearman_rho:.6f}" for r in rows]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# protocols
# ---------------------------------------------------------------------------


def _model_for(models, name: str):
    if isinstance(models, Mapping):
        if name not in models:
            raise KeyError(f"no model for class {name!r}")
        return models[name]
    return models


def _class_groups(test_set: Dataset):
    for cid in test_set.present_classes():
        idx = np.nonzero(test_set.class_ids == cid)[0]
        yield CLASS_NAMES[cid], idx


def diversity_eval(models, test_set: Dataset, schedule: NoiseSchedule) -> DiversityReport:
    """Per-class, per-pose reconstruction MSE and output spread over the schedule.

    ``models`` is one model shared by all classes or a mapping from class
    name to that class's model. For each pose, ``mean_mse`` and ``std_mse``
    are the mean and standard deviation over runs of the test-set mean MSE;
    ``voxelwise_std`` is the per-voxel std over runs, averaged over voxels
    and objects.
    """
    if test_set.poses != NUM_POSES:
        raise ValueError(f"diversity evaluation needs all {NUM_POSES} poses, test set has {test_set.poses}")
    if len(test_set) == 0:
        raise ValueError("empty test set")
    rows = []
    for name, idx in _class_groups(test_set):
        model = _model_for(models, name)
        target = test_set.voxels[idx].reshape(len(idx), -1).astype(np.float64)
        for pose in range(NUM_POSES):
            probs = model.predict_schedule(test_set.images[idx, pose], schedule.values)
            probs = probs.reshape(len(schedule.values), len(idx), -1).astype(np.float64)
            per_run = ((probs - target[None]) ** 2).mean(axis=2).mean(axis=1)
            vox_std = _std(probs, axis=0).mean(axis=1).mean()
            rows.append(DiversityRow(name, pose, float(per_run.mean()), float(_std(per_run)), float(vox_std)))
    return DiversityReport(rows)


def iou_eval(models, test_set: Dataset, schedule: NoiseSchedule, threshold: float = 0.5) -> IOUReport:
    """Per-class mean and std over runs of the test-set mean IOU (all poses)."""
    rows = []
    for name, idx in _class_groups(test_set):
        model = _model_for(models, name)
        gt = test_set.voxels[idx].astype(bool)
        per_run = np.zeros(len(schedule.values))
        for pose in range(test_set.poses):
            probs = model.predict_schedule(test_set.images[idx, pose], schedule.values)
            pred = probs > threshold
            for k in range(len(schedule.values)):
                per_run[k] += sum(iou(pred[k, j], gt[j]) for j in range(len(idx)))
        per_run /= len(idx) * test_set.poses
        rows.append(IOURow(name, float(per_run.mean()), float(_std(per_run))))
    return IOUReport(rows)


def spearman_rho(a, b) -> float:
    """Rank correlation with average ranks for ties; 0 when either side is constant."""
    ra, rb = rankdata(a), rankdata(b)
    da, db = ra - ra.mean(), rb - rb.mean()
    denom = math.sqrt(float((da * da).sum() * (db * db).sum()))
    if denom == 0:
        return 0.0
    return float((da * db).sum() / denom)


def hypothesis_check(report: DiversityReport) -> list[HypothesisRow]:
    """Ranking diagnostics linking pose informativeness (low MSE) to low spread."""
    out = []
    for name in report.classes():
        rows = report.for_class(name)
        if len(rows) != NUM_POSES:
            raise ValueError(f"class {name!r} has {len(rows)} pose rows, expected {NUM_POSES}")
        means = [r.mean_mse for r in rows]
        stds = [r.std_mse for r in rows]
        best = int(np.argmin(means))
        out.append(HypothesisRow(name, rows[best].pose, float(rankdata(stds)[best]), spearman_rho(means, stds)))
    return out
