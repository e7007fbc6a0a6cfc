import itertools

import numpy as np
import pytest

from voxcvae import synth
from voxcvae.rng import Rng
from voxcvae.synth import (
    CLASS_NAMES,
    Dataset,
    ShapeSpec,
    build_dataset,
    export_voxels,
    generate_shape,
    import_voxels,
    render_ortho,
    render_poses,
    rotate_grid,
)
from voxcvae.tensor_io import FormatError


def test_generation_is_deterministic():
    for c in CLASS_NAMES:
        a = generate_shape(ShapeSpec(c), Rng(12), 32)
        b = generate_shape(ShapeSpec(c), Rng(12), 32)
        assert np.array_equal(a, b)


def test_chair_has_legs_and_back():
    g = generate_shape(ShapeSpec("chair"), Rng(3), 32)
    assert g[:, :16].any() and g[:, 16:].any()


def test_unknown_class_rejected():
    with pytest.raises(ValueError):
        ShapeSpec("sofa")


@pytest.mark.parametrize("name", CLASS_NAMES)
def test_occupancy_fraction_bounds(name):
    fracs = [generate_shape(ShapeSpec(name), Rng(s), 32).mean() for s in range(1000)]
    assert 0 < min(fracs) and max(fracs) < 0.5


def test_rotation_identity_and_four_quarter_turns():
    g = generate_shape(ShapeSpec("desk"), Rng(5), 16)
    assert np.array_equal(rotate_grid(g, 0), g)
    r = g
    for _ in range(4):
        r = rotate_grid(r, 90)
    assert np.array_equal(r, g)


def test_quarter_turn_preserves_count():
    g = generate_shape(ShapeSpec("monitor"), Rng(6), 32)
    for a in (90, 180, 270):
        assert rotate_grid(g, a).sum() == g.sum()


def test_rotation_rejects_off_grid_angles():
    with pytest.raises(ValueError):
        rotate_grid(np.zeros((4, 4, 4), np.uint8), 30)


def test_half_step_twice_close_to_quarter_turn():
    for name in CLASS_NAMES:
        for s in range(100):
            g = generate_shape(ShapeSpec(name), Rng(s), 32)
            ratio = rotate_grid(rotate_grid(g, 45), 45).sum() / rotate_grid(g, 90).sum()
            assert 0.85 <= ratio <= 1.15, (name, s, ratio)


def test_render_empty_grid():
    img = render_ortho(np.zeros((32, 32, 32), np.uint8), 0)
    assert img.shape == (128, 128, 4) and not img.any()


def test_render_full_cube():
    img = render_ortho(np.ones((32, 32, 32), np.uint8), 0)
    assert np.all(img[..., 2] == 1)
    assert np.unique(img[..., 1]).size == 1
    assert np.all(img[..., 3] == img[..., 2])


def test_render_single_centre_voxel_area():
    g = np.zeros((32, 32, 32), np.uint8)
    g[16, 16, 16] = 1
    assert render_ortho(g, 0)[..., 2].sum() == 16


def test_render_values_and_background():
    g = generate_shape(ShapeSpec("bed"), Rng(7), 32)
    imgs = render_poses(g)
    assert imgs.shape == (8, 128, 128, 4) and imgs.dtype == np.float32
    assert imgs.min() >= 0 and imgs.max() <= 1
    bg = imgs[..., 2] == 0
    assert not imgs[bg].any()
    assert np.array_equal(render_ortho(g, 135), render_ortho(g, 135))


def test_render_nearer_surfaces_are_brighter():
    g = np.zeros((8, 8, 8), np.uint8)
    g[1, 4, 7] = 1  # front layer, nearest the camera
    g[5, 4, 0] = 1  # back layer
    img = render_ortho(g, 0, 8)
    row = 7 - 4
    assert img[row, 1, 1] == 1.0 and img[row, 5, 1] == pytest.approx(1 / 8)
    assert img[row, 1, 0] < img[row, 5, 0]


@pytest.mark.parametrize("name", ["chair", "desk", "monitor"])
def test_asymmetric_classes_have_distinct_silhouettes(name):
    for s in range(100):
        g = generate_shape(ShapeSpec(name), Rng(s), 32)
        sil = [render_ortho(g, 45 * p, 32)[..., 2] for p in range(8)]
        for i, j in itertools.combinations(range(8), 2):
            assert not np.array_equal(sil[i], sil[j]), (name, s, i, j)


def test_build_dataset_split_and_determinism(tmp_path):
    tr, te = build_dataset(["chair", "bed"], 10, 0.8, Rng(1), 16, out_dir=tmp_path / "a")
    assert len(tr) == 16 and len(te) == 4
    for cid in (0, 1):
        assert (tr.class_ids == cid).sum() == 8 and (te.class_ids == cid).sum() == 2
    build_dataset(["chair", "bed"], 10, 0.8, Rng(1), 16, out_dir=tmp_path / "b")
    for f in ("train.voxd", "test.voxd"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_dataset_round_trip_bitwise(tmp_path):
    tr, _ = build_dataset(["desk"], 3, 0.5, Rng(2), 16, out_dir=tmp_path)
    back = Dataset.load(tmp_path / "train.voxd")
    assert np.array_equal(back.voxels, tr.voxels)
    assert back.images.tobytes() == tr.images.tobytes()
    assert np.array_equal(back.instance_seeds, tr.instance_seeds)
    assert back.to_bytes() == (tmp_path / "train.voxd").read_bytes()


def test_dataset_rejects_truncation(tmp_path):
    tr, _ = build_dataset(["desk"], 2, 0.5, Rng(2), 8)
    buf = tr.to_bytes()
    for cut in (10, 28, len(buf) - 1):
        with pytest.raises(FormatError):
            Dataset.from_bytes(buf[:cut])


def test_dataset_rejects_bad_magic_and_version():
    tr, _ = build_dataset(["bed"], 2, 0.5, Rng(2), 8)
    buf = tr.to_bytes()
    with pytest.raises(FormatError, match="magic"):
        Dataset.from_bytes(b"NOPE" + buf[4:])
    with pytest.raises(FormatError, match="version"):
        Dataset.from_bytes(buf[:4] + (7).to_bytes(4, "little") + buf[8:])


def test_export_import_round_trip(tmp_path):
    g = generate_shape(ShapeSpec("monitor"), Rng(8), 16)
    export_voxels(g, tmp_path / "g.voxd", "monitor", 8)
    assert np.array_equal(import_voxels(tmp_path / "g.voxd", 16), g)
    with pytest.raises(FormatError, match="extent"):
        import_voxels(tmp_path / "g.voxd", 32)


def test_import_rejects_truncated_and_non_binary(tmp_path):
    g = np.zeros((3, 3, 3), np.uint8)
    g[0, 0, 0] = 1
    export_voxels(g, tmp_path / "g.voxd")
    buf = (tmp_path / "g.voxd").read_bytes()
    (tmp_path / "cut.voxd").write_bytes(buf[:-1])
    with pytest.raises(FormatError):
        import_voxels(tmp_path / "cut.voxd")
    bad = bytearray(buf)
    bad[-1] |= 0x80  # bit 31 of a 27-bit payload
    (tmp_path / "bad.voxd").write_bytes(bytes(bad))
    with pytest.raises(FormatError, match="padding"):
        import_voxels(tmp_path / "bad.voxd")
    with pytest.raises(ValueError, match="binary"):
        export_voxels(g * 2, tmp_path / "two.voxd")


def test_make_sample_matches_pose_renders():
    grid, imgs = synth.make_sample("chair", 42, 16, 64)
    for p in range(8):
        assert np.array_equal(imgs[p], render_ortho(grid, 45 * p, 64))
