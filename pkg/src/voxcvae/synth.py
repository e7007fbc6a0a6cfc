"""Procedural furniture voxels, 8-pose orthographic renders and VOXD files.

Grids are indexed ``[x, y, z]``: x runs left to right as seen from the front,
y is up, and the camera sits on the +z side looking toward -z.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import Rng
from .tensor_io import FormatError

CLASS_NAMES = ("bed", "chair", "desk", "monitor")
NUM_POSES = 8
POSE_STEP = 45
IMAGE_CHANNELS = 4  # intensity, depth, silhouette, alpha


def class_id(name: str) -> int:
    try:
        return CLASS_NAMES.index(name)
    except ValueError:
        raise ValueError(f"unknown class {name!r}; expected one of {CLASS_NAMES}") from None


# ---------------------------------------------------------------------------
# shapes
# ---------------------------------------------------------------------------

_DEFAULT_RANGES = {
    "bed": {
        "width": (0.45, 0.60), "length": (0.55, 0.64), "leg_height": (0.05, 0.09),
        "mattress_top": (0.18, 0.30), "head_height": (0.18, 0.32), "head_thickness": (0.06, 0.10),
        "foot_height": (0.05, 0.12),
    },
    "chair": {
        "width": (0.42, 0.62), "depth": (0.40, 0.60), "seat_height": (0.25, 0.38),
        "seat_thickness": (0.06, 0.09), "leg_thickness": (0.07, 0.11), "back_height": (0.28, 0.36),
        "back_thickness": (0.06, 0.10), "step_width": (0.35, 0.55), "step_height": (0.08, 0.12),
    },
    "desk": {
        "width": (0.50, 0.62), "depth": (0.36, 0.50), "height": (0.40, 0.60),
        "top_thickness": (0.06, 0.10), "leg_thickness": (0.07, 0.10),
        "cabinet_width": (0.25, 0.40), "cabinet_depth": (0.50, 0.75),
        "hutch_width": (0.30, 0.45), "hutch_height": (0.10, 0.18), "hutch_depth": (0.08, 0.12),
    },
    "monitor": {
        "panel_width": (0.50, 0.64), "panel_height": (0.30, 0.42), "panel_thickness": (0.07, 0.10),
        "panel_bottom": (0.22, 0.32), "neck_offset": (0.08, 0.14), "neck_width": (0.08, 0.11),
        "neck_depth": (0.06, 0.09), "base_width": (0.25, 0.40), "base_depth": (0.20, 0.32),
        "base_thickness": (0.05, 0.08),
    },
}


@dataclass
class ShapeSpec:
    """A furniture class and the ranges (grid fractions) its parts are drawn from."""

    class_name: str
    ranges: dict[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        class_id(self.class_name)
        merged = dict(_DEFAULT_RANGES[self.class_name])
        merged.update(self.ranges)
        self.ranges = merged

    def sample(self, rng: Rng) -> dict[str, float]:
        return {k: rng.uniform(None, lo, hi) for k, (lo, hi) in sorted(self.ranges.items())}


class _Grid:
    def __init__(self, extent: int):
        self.e = extent
        self.occ = np.zeros((extent,) * 3, dtype=np.uint8)

    def _span(self, a: float, b: float) -> slice:
        i0 = min(max(int(round(a * self.e)), 0), self.e - 1)
        i1 = min(max(int(round(b * self.e)), i0 + 1), self.e)
        return slice(i0, i1)

    def box(self, x0, x1, y0, y1, z0, z1) -> None:
        self.occ[self._span(x0, x1), self._span(y0, y1), self._span(z0, z1)] = 1


def _bed(g: _Grid, p) -> None:
    x0, x1 = 0.5 - p["width"] / 2, 0.5 + p["width"] / 2
    z0, z1 = 0.5 - p["length"] / 2, 0.5 + p["length"] / 2
    leg, top = p["leg_height"], p["mattress_top"]
    t = 0.07
    for lx in (x0, x1 - t):
        for lz in (z0, z1 - t):
            g.box(lx, lx + t, 0.0, leg, lz, lz + t)
    g.box(x0, x1, leg, top, z0, z1)
    g.box(x0, x1, leg, min(top + p["head_height"], 0.95), z0, z0 + p["head_thickness"])
    g.box(x0, x1, leg, top + p["foot_height"], z1 - 0.06, z1)


def _chair(g: _Grid, p) -> None:
    x0, x1 = 0.5 - p["width"] / 2, 0.5 + p["width"] / 2
    z0, z1 = 0.5 - p["depth"] / 2, 0.5 + p["depth"] / 2
    sh, lt = p["seat_height"], p["leg_thickness"]
    for lx in (x0, x1 - lt):
        for lz in (z0, z1 - lt):
            g.box(lx, lx + lt, 0.0, sh, lz, lz + lt)
    seat_top = sh + p["seat_thickness"]
    g.box(x0, x1, sh, seat_top, z0, z1)
    back_top = seat_top + p["back_height"]
    bz1 = z0 + p["back_thickness"]
    g.box(x0, x1, seat_top, back_top, z0, bz1)
    # raised left section breaks the mirror symmetry of the silhouette
    xs = x0 + p["step_width"] * p["width"]
    g.box(x0, xs, back_top, min(back_top + p["step_height"], 0.97), z0, bz1)


def _desk(g: _Grid, p) -> None:
    x0, x1 = 0.5 - p["width"] / 2, 0.5 + p["width"] / 2
    z0, z1 = 0.5 - p["depth"] / 2, 0.5 + p["depth"] / 2
    h, lt = p["height"], p["leg_thickness"]
    for lx in (x0, x1 - lt):
        for lz in (z0, z1 - lt):
            g.box(lx, lx + lt, 0.0, h, lz, lz + lt)
    g.box(x0, x1, h, h + p["top_thickness"], z0, z1)
    cw = p["cabinet_width"] * p["width"]
    cd = p["cabinet_depth"] * p["depth"]
    g.box(x0, x0 + cw, 0.0, h, z1 - cd, z1)
    # rear shelf over the right end, visible above the top from every azimuth
    top = h + p["top_thickness"]
    hw = p["hutch_width"] * p["width"]
    g.box(x1 - hw, x1, top, min(top + p["hutch_height"], 0.97), z0, z0 + p["hutch_depth"])


def _monitor(g: _Grid, p) -> None:
    nx = 0.5 + p["neck_offset"]
    nw, nd = p["neck_width"], p["neck_depth"]
    nz0 = 0.40
    nz1 = nz0 + nd
    bt = p["base_thickness"]
    g.box(nx - p["base_width"] / 2, nx + p["base_width"] / 2, 0.0, bt, nz0 - 0.03, nz0 - 0.03 + p["base_depth"])
    pb, ph = p["panel_bottom"], p["panel_height"]
    g.box(nx - nw / 2, nx + nw / 2, bt, pb + ph / 2, nz0, nz1)
    pw = p["panel_width"]
    g.box(0.5 - pw / 2, 0.5 + pw / 2, pb, pb + ph, nz1, nz1 + p["panel_thickness"])


_TEMPLATES = {"bed": _bed, "chair": _chair, "desk": _desk, "monitor": _monitor}


def generate_shape(spec: ShapeSpec, rng: Rng, extent: int = 32) -> np.ndarray:
    """Compose the class template's boxes with parameters drawn from ``spec``."""
    g = _Grid(extent)
    _TEMPLATES[spec.class_name](g, spec.sample(rng))
    return g.occ


# ---------------------------------------------------------------------------
# rotation and rendering
# ---------------------------------------------------------------------------

_EXACT = {0: (1, 0), 90: (0, 1), 180: (-1, 0), 270: (0, -1)}


def rotate_grid(grid: np.ndarray, azimuth: int) -> np.ndarray:
    """Rotate about the vertical axis through the grid centre.

    Multiples of 90 degrees permute indices exactly; the 45-degree
    intermediates take the nearest source voxel of each target voxel.
    """
    if azimuth % POSE_STEP:
        raise ValueError(f"azimuth must be a multiple of {POSE_STEP} degrees, got {azimuth}")
    a = azimuth % 360
    if a == 0:
        return grid.copy()
    e = grid.shape[0]
    # doubled, centred coordinates put the rotation centre at 0
    u = 2 * np.arange(e) - (e - 1)
    ux, uz = np.meshgrid(u, u, indexing="ij")
    if a in _EXACT:
        c, s = _EXACT[a]
        sx = (c * ux + s * uz + (e - 1)) // 2
        sz = (-s * ux + c * uz + (e - 1)) // 2
    else:
        c, s = math.cos(math.radians(a)), math.sin(math.radians(a))
        sx = np.rint((c * ux + s * uz + (e - 1)) / 2).astype(int)
        sz = np.rint((-s * ux + c * uz + (e - 1)) / 2).astype(int)
    ok = (sx >= 0) & (sx < e) & (sz >= 0) & (sz < e)
    out = np.zeros_like(grid)
    xi, zi = np.nonzero(ok)
    out[xi, :, zi] = grid[sx[ok], :, sz[ok]]
    return out


def render_ortho(grid: np.ndarray, azimuth: int = 0, image_extent: int | None = None) -> np.ndarray:
    """Orthographic first-hit render along -z after rotating by ``azimuth``.

    Returns an (I, I, 4) float32 image of [intensity, depth, silhouette,
    alpha]; background pixels are zero in every channel.
    """
    e = grid.shape[0]
    image_extent = image_extent or 4 * e
    if image_extent % e:
        raise ValueError(f"image extent {image_extent} is not a multiple of grid extent {e}")
    scale = image_extent // e
    occ = rotate_grid(grid, azimuth).astype(bool)
    hit = occ.any(axis=2)
    z_hit = e - 1 - np.argmax(occ[:, :, ::-1], axis=2)
    depth = np.where(hit, (z_hit + 1) / e, 0.0)  # nearest layer -> 1
    intensity = np.where(hit, 0.3 + 0.7 * (1.0 - depth), 0.0)
    sil = hit.astype(np.float64)
    planes = np.stack([intensity, depth, sil, sil], axis=-1)  # indexed [x, y, ch]
    img = planes.transpose(1, 0, 2)[::-1]  # rows top-down, columns left-right
    img = img.repeat(scale, axis=0).repeat(scale, axis=1)
    return np.ascontiguousarray(img, dtype=np.float32)


def render_poses(grid: np.ndarray, image_extent: int | None = None) -> np.ndarray:
    return np.stack([render_ortho(grid, k * POSE_STEP, image_extent) for k in range(NUM_POSES)])


# ---------------------------------------------------------------------------
# datasets and VOXD files
# ---------------------------------------------------------------------------

VOXD_MAGIC = b"VOXD"
VOXD_VERSION = 1
_HEADER = struct.Struct("<4sIIIIII")


@dataclass
class Dataset:
    """Objects with ground-truth voxels and their per-pose condition images."""

    class_ids: np.ndarray  # (n,) uint32
    instance_seeds: np.ndarray  # (n,) uint64
    voxels: np.ndarray  # (n, E, E, E) uint8
    images: np.ndarray  # (n, poses, I, I, C) float32

    def __len__(self) -> int:
        return len(self.class_ids)

    @property
    def extent(self) -> int:
        return self.voxels.shape[1]

    @property
    def image_extent(self) -> int:
        return self.images.shape[2] if self.images.ndim == 5 else 0

    @property
    def poses(self) -> int:
        return self.images.shape[1]

    @property
    def channels(self) -> int:
        return self.images.shape[4] if self.images.ndim == 5 else 0

    def select(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.class_ids[idx], self.instance_seeds[idx], self.voxels[idx], self.images[idx])

    def of_class(self, cid: int) -> "Dataset":
        return self.select(np.nonzero(self.class_ids == cid)[0])

    def present_classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.class_ids))

    def to_bytes(self) -> bytes:
        if not np.isin(self.voxels, (0, 1)).all():
            raise ValueError("voxel occupancy must be binary")
        parts = [_HEADER.pack(VOXD_MAGIC, VOXD_VERSION, len(self), self.extent,
                              self.image_extent, self.channels, self.poses)]
        for i in range(len(self)):
            parts.append(struct.pack("<IQ", int(self.class_ids[i]), int(self.instance_seeds[i])))
            parts.append(np.packbits(self.voxels[i].reshape(-1), bitorder="little").tobytes())
            parts.append(np.ascontiguousarray(self.images[i], dtype="<f4").tobytes())
        return b"".join(parts)

    def save(self, path) -> None:
        path = Path(path)
        try:
            path.write_bytes(self.to_bytes())
        except OSError as exc:
            raise OSError(f"cannot write dataset {path}: {exc}") from exc

    @classmethod
    def from_bytes(cls, buf: bytes, source: str = "<bytes>") -> "Dataset":
        if len(buf) < _HEADER.size:
            raise FormatError(f"{source}: truncated VOXD header")
        magic, version, count, extent, img, ch, poses = _HEADER.unpack_from(buf, 0)
        if magic != VOXD_MAGIC:
            raise FormatError(f"{source}: bad magic {magic!r}, expected {VOXD_MAGIC!r}")
        if version != VOXD_VERSION:
            raise FormatError(f"{source}: VOXD version {version}, this build reads {VOXD_VERSION}")
        if extent == 0:
            raise FormatError(f"{source}: zero voxel extent")
        nvox = extent**3
        vox_bytes = (nvox + 7) // 8
        img_floats = poses * img * img * ch
        per = 12 + vox_bytes + 4 * img_floats
        if len(buf) != _HEADER.size + count * per:
            raise FormatError(
                f"{source}: header declares {count} samples ({_HEADER.size + count * per} bytes), file has {len(buf)}"
            )
        class_ids = np.empty(count, dtype=np.uint32)
        seeds = np.empty(count, dtype=np.uint64)
        voxels = np.empty((count, extent, extent, extent), dtype=np.uint8)
        images = np.empty((count, poses, img, img, ch), dtype=np.float32)
        off = _HEADER.size
        for i in range(count):
            class_ids[i], seeds[i] = struct.unpack_from("<IQ", buf, off)
            off += 12
            packed = np.frombuffer(buf, dtype=np.uint8, count=vox_bytes, offset=off)
            bits = np.unpackbits(packed, bitorder="little")
            if bits[nvox:].any():
                raise FormatError(f"{source}: sample {i} has nonzero padding bits")
            voxels[i] = bits[:nvox].reshape(extent, extent, extent)
            off += vox_bytes
            images[i] = np.frombuffer(buf, dtype="<f4", count=img_floats, offset=off).reshape(poses, img, img, ch)
            off += 4 * img_floats
        return cls(class_ids, seeds, voxels, images)

    @classmethod
    def load(cls, path) -> "Dataset":
        path = Path(path)
        try:
            buf = path.read_bytes()
        except OSError as exc:
            raise OSError(f"cannot read dataset {path}: {exc}") from exc
        return cls.from_bytes(buf, str(path))


def export_voxels(grid: np.ndarray, path, class_name: str | int = 0, instance_seed: int = 0) -> None:
    """Write one grid as a VOXD file with count 1 and no poses."""
    grid = np.asarray(grid)
    if grid.ndim != 3 or len(set(grid.shape)) != 1:
        raise ValueError(f"grid must be a cube, got shape {grid.shape}")
    cid = class_name if isinstance(class_name, int) else class_id(class_name)
    ds = Dataset(
        np.array([cid], dtype=np.uint32), np.array([instance_seed], dtype=np.uint64),
        grid[None],
        np.zeros((1, 0, 0, 0, 0), dtype=np.float32),
    )
    ds.save(path)


def import_voxels(path, extent: int | None = None) -> np.ndarray:
    """Read the first grid of a VOXD file, checking its extent."""
    ds = Dataset.load(path)
    if len(ds) < 1:
        raise FormatError(f"{path}: file holds no grids")
    if extent is not None and ds.extent != extent:
        raise FormatError(f"{path}: grid extent {ds.extent}, expected {extent}")
    return ds.voxels[0]


def make_sample(class_name: str, instance_seed: int, extent: int = 32, image_extent: int | None = None):
    """Voxels and the 8 pose renders of one object."""
    grid = generate_shape(ShapeSpec(class_name), Rng(instance_seed), extent)
    return grid, render_poses(grid, image_extent)


def build_dataset(
    classes,
    per_class_count: int,
    split_fraction: float,
    rng: Rng,
    extent: int = 32,
    image_extent: int | None = None,
    out_dir=None,
) -> tuple[Dataset, Dataset]:
    """Generate, render and split ``per_class_count`` objects of each class.

    With ``out_dir`` the splits are also written to ``train.voxd`` and
    ``test.voxd`` there.
    """
    if per_class_count < 2:
        raise ValueError("per_class_count must be at least 2")
    if not 0.0 < split_fraction < 1.0:
        raise ValueError("split_fraction must lie in (0, 1)")
    image_extent = image_extent or 4 * extent
    train_rows, test_rows = [], []
    for name in classes:
        cid = class_id(name)
        crng = rng.spawn(cid)
        seeds = crng.integers(0, 2**63 - 1, size=per_class_count)
        n_train = min(max(int(round(per_class_count * split_fraction)), 1), per_class_count - 1)
        order = crng.permutation(per_class_count)
        for rank, j in enumerate(order):
            grid, imgs = make_sample(name, int(seeds[j]), extent, image_extent)
            row = (cid, int(seeds[j]), grid, imgs)
            (train_rows if rank < n_train else test_rows).append(row)

    def pack(rows) -> Dataset:
        return Dataset(
            np.array([r[0] for r in rows], dtype=np.uint32),
            np.array([r[1] for r in rows], dtype=np.uint64),
            np.stack([r[2] for r in rows]).astype(np.uint8),
            np.stack([r[3] for r in rows]).astype(np.float32),
        )

    train, test = pack(train_rows), pack(test_rows)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        train.save(out / "train.voxd")
        test.save(out / "test.voxd")
    return train, test
