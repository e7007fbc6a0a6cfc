import numpy as np
import pytest

from voxcvae import nn, selftest
from voxcvae.cli import main, parse, pgm_bytes
from voxcvae.synth import export_voxels
from voxcvae.tensor import Tensor


def test_flag_overrides_config_file(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("# run settings\nseed = 3\nepochs = 7  # short\nbatch-size = 4\n")
    args = parse(["train", "--config", str(cfg), "--seed", "7", "--data", "d.voxd", "--out", "o"])
    assert args.seed == 7 and args.epochs == 7 and args.batch_size == 4


def test_config_can_supply_required_flags(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(f"data = {tmp_path / 'd.voxd'}\nout = {tmp_path / 'o'}\nper_class = true\n")
    args = parse(["train", "--config", str(cfg)])
    assert args.per_class is True and args.data == tmp_path / "d.voxd"


def test_config_rejects_unknown_keys(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("learning_rate_schedule = cosine\n")
    assert main(["train", "--config", str(cfg), "--data", "x", "--out", "y"]) == 2
    assert "unknown config key" in capsys.readouterr().err


def test_unknown_command_is_usage_error():
    assert main(["bogus-cmd"]) == 2


def test_unknown_flag_and_missing_required_flag():
    assert main(["train", "--data", "d", "--out", "o", "--frobnicate"]) == 2
    assert main(["train", "--out", "o"]) == 2


def test_gen_data_class_list():
    args = parse(["gen-data", "--classes", "chair,desk", "--per-class", "10", "--out", "d"])
    assert args.classes == ["chair", "desk"] and args.per_class == 10
    assert main(["gen-data", "--classes", "chair,sofa", "--out", "d"]) == 2


def test_schedule_range_flag():
    args = parse(["diversity", "--checkpoint", "c", "--data", "d", "--out", "o", "--schedule-range=-1.5,3"])
    assert args.schedule_range == (-1.5, 3.0)


def test_runtime_failure_exit_code(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "missing.voxd"), "--out", str(tmp_path)]) == 1
    assert "missing.voxd" in capsys.readouterr().err


def test_resolved_config_is_logged(tmp_path, caplog):
    caplog.set_level("INFO")
    main(["gen-data", "--classes", "bed", "--per-class", "2", "--out", str(tmp_path)])
    text = caplog.text
    assert "resolved config:" in text and "split=0.8" in text and "profile=tiny" in text


def test_pgm_header_and_values():
    buf = pgm_bytes(np.zeros((128, 128)))
    assert buf.startswith(b"P5\n128 128\n255\n") and len(buf) == 15 + 128 * 128
    assert set(buf[15:]) == {0}


def test_render_preview_empty_and_cube(tmp_path):
    empty = np.zeros((16, 16, 16), np.uint8)
    export_voxels(empty, tmp_path / "e.voxd")
    assert main(["render-preview", "--input", str(tmp_path / "e.voxd"), "--out", str(tmp_path / "e")]) == 0
    sil = (tmp_path / "e" / "pose0_sil.pgm").read_bytes()
    assert sil[:15] == b"P5\n128 128\n255\n" and not any(sil[15:])

    cube = np.zeros((16, 16, 16), np.uint8)
    cube[4:12, 4:12, 4:12] = 1
    export_voxels(cube, tmp_path / "c.voxd")
    assert main(["render-preview", "--input", str(tmp_path / "c.voxd"), "--out", str(tmp_path / "c")]) == 0
    pix = np.frombuffer((tmp_path / "c" / "pose0_sil.pgm").read_bytes()[15:], np.uint8).reshape(128, 128).copy()
    assert np.all(pix[32:96, 32:96] == 255)
    pix[32:96, 32:96] = 0
    assert not pix.any()
    assert len(list((tmp_path / "c").glob("*.pgm"))) == 16


def test_selftest_command_passes(capsys):
    assert main(["selftest"]) == 0
    first = capsys.readouterr().out
    assert main(["selftest"]) == 0
    assert capsys.readouterr().out == first
    assert "5/5 suites passed" in first


def test_conv_suite_catches_flipped_kernel():
    def broken(x, k, b):
        return nn.conv3d_same(x, Tensor(k.data[::-1].copy()), b)

    result = selftest.conv_suite(conv=broken)
    assert not result.passed and "probe 0" in result.failure


def test_selftest_reports_first_failure(monkeypatch, capsys):
    monkeypatch.setitem(selftest.SUITES, "conv", lambda: selftest.conv_suite(conv=lambda x, k, b: nn.conv3d_same(x, k, b) * 1.001))
    assert main(["selftest"]) == 1
    out = capsys.readouterr().out
    assert "FAIL conv" in out and "first failure" in out


def test_full_pipeline_is_byte_reproducible(tmp_path):
    d = tmp_path / "data"
    assert main(["gen-data", "--classes", "chair", "--per-class", "3", "--out", str(d)]) == 0
    train_args = ["train", "--data", str(d / "train.voxd"), "--epochs", "1", "--batch-size", "8", "--seed", "2"]
    assert main(train_args + ["--out", str(tmp_path / "a")]) == 0
    assert main(train_args + ["--out", str(tmp_path / "b")]) == 0
    ckpt = tmp_path / "a" / "cvae.ckpt"
    assert ckpt.read_bytes() == (tmp_path / "b" / "cvae.ckpt").read_bytes()
    for run in ("r1", "r2"):
        assert main(["eval-iou", "--checkpoint", str(ckpt), "--data", str(d / "test.voxd"),
                     "--schedule-count", "3", "--out", str(tmp_path / run / "iou.csv")]) == 0
        assert main(["diversity", "--checkpoint", str(ckpt), "--data", str(d / "test.voxd"),
                     "--schedule-count", "3", "--out", str(tmp_path / run)]) == 0
        assert main(["predict", "--checkpoint", str(ckpt), "--data", str(d / "test.voxd"),
                     "--pose", "2", "--out", str(tmp_path / run / "p.tnsr")]) == 0
    for f in ("iou.csv", "diversity.csv", "hypothesis.csv", "p.tnsr"):
        assert (tmp_path / "r1" / f).read_bytes() == (tmp_path / "r2" / f).read_bytes()


def test_predict_rejects_out_of_range(tmp_path):
    d = tmp_path / "data"
    main(["gen-data", "--classes", "bed", "--per-class", "2", "--out", str(d)])
    main(["train", "--data", str(d / "train.voxd"), "--epochs", "1", "--out", str(tmp_path)])
    code = main(["predict", "--checkpoint", str(tmp_path / "cvae.ckpt"), "--data", str(d / "test.voxd"),
                 "--index", "9", "--out", str(tmp_path / "p.tnsr")])
    assert code == 1


def test_profile_mismatch_is_runtime_error(tmp_path):
    d = tmp_path / "data"
    main(["gen-data", "--classes", "bed", "--per-class", "2", "--out", str(d)])
    main(["train", "--data", str(d / "train.voxd"), "--epochs", "1", "--out", str(tmp_path)])
    code = main(["eval-iou", "--profile", "full", "--checkpoint", str(tmp_path / "cvae.ckpt"),
                 "--data", str(d / "test.voxd"), "--out", str(tmp_path / "i.csv")])
    assert code == 1


@pytest.mark.parametrize("suite", sorted(selftest.SUITES))
def test_each_suite_passes(suite):
    assert selftest.SUITES[suite]().passed
