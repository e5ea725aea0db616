import json

import numpy as np
import pytest

from condvc.cli import main
from condvc.frame_model import load_raw_video, save_raw_video
from condvc.training import translating_texture_clips

W = H = 32


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    clip = translating_texture_clips(1, 16, W, seed=3)[0]
    save_raw_video(clip, d / "in.rgb", "rgb24")
    (d / "train.cfg").write_text(
        "# tiny run\nmode = Conditional\nlambdas = 0.01 0.1\niterations = 3\ncrop = 32\n"
        "size = 32\nclips = 4\nframes = 3\nbatch_size = 2\nhidden = 8\nlatent_channels = 8\n"
        "hyper_channels = 4\n")
    return d


def _json_out(capsys):
    return json.loads(capsys.readouterr().out)


@pytest.fixture(scope="module")
def trained(workdir):
    assert main(["train", str(workdir / "train.cfg"), "--out", str(workdir / "ck")]) == 0
    return sorted((workdir / "ck").glob("*.pt"))


def test_train_writes_checkpoints_and_logs(trained, workdir):
    assert [p.name for p in trained] == ["conditional_lambda0.01.pt", "conditional_lambda0.1.pt"]
    assert (workdir / "ck" / "conditional_lambda0.1.csv").exists()


@pytest.mark.parametrize("cfg", ["ai", "ldp", "ra"])
def test_encode_decode_eval_roundtrip(trained, workdir, capsys, cfg):
    ck = str(trained[0])
    bs = workdir / f"{cfg}.bin"
    capsys.readouterr()
    assert main(["encode", "--input", str(workdir / "in.rgb"), "--width", str(W), "--height", str(H),
                 "--pix-fmt", "rgb24", "--config", cfg, "--intra-period", "8", "--gop", "4",
                 "--checkpoint", ck, "--out", str(bs)]) == 0
    enc = _json_out(capsys)
    assert enc["bytes"] == bs.stat().st_size
    out = workdir / f"{cfg}.rgb"
    assert main(["decode", "--bitstream", str(bs), "--checkpoint", ck, "--out", str(out)]) == 0
    dec = _json_out(capsys)
    assert dec["frames"] == 16 and dec["width"] == W
    assert main(["eval", "--recon", str(out), "--orig", str(workdir / "in.rgb"), "--width", str(W),
                 "--height", str(H), "--bitstream", str(bs)]) == 0
    rec = _json_out(capsys)
    assert rec["rate_bpp"] == pytest.approx(8 * enc["bytes"] / (16 * W * H))
    # decoder output matches the encoder-side reconstruction up to 8-bit rounding on disk
    assert rec["msssim"] == pytest.approx(enc["rd"]["msssim"], abs=2e-3)
    a = load_raw_video(out, W, H, "rgb24", 25)
    assert len(a) == 16


def test_ablate(trained, workdir, capsys):
    man = {"checkpoints": [{"mode": "Conditional", "lambda": 0.01, "path": str(trained[0])},
                           {"mode": "Conditional", "lambda": 0.1, "path": str(trained[1])},
                           {"mode": "AIVC", "lambda": 0.1, "path": "nope.pt"}],
           "eval": {"synthetic": {"clips": 1, "frames": 4, "size": 32, "seed": 5}},
           "out": str(workdir / "abl")}
    (workdir / "m.json").write_text(json.dumps(man))
    capsys.readouterr()
    assert main(["ablate", "--manifest", str(workdir / "m.json")]) == 0
    res = _json_out(capsys)
    assert res["absent"] == [{"mode": "AIVC", "lambda": 0.1}]
    assert (workdir / "abl" / "rd_points.csv").exists()


def test_usage_error_exit_1(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["encode", "--width", "3"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["bogus"])
    assert exc.value.code == 1


def test_bad_config_exit_1(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("mode = Nonsense\n")
    assert main(["train", str(cfg)]) == 1


def test_data_error_exit_2(trained, tmp_path):
    bad = tmp_path / "short.rgb"
    bad.write_bytes(b"\0" * (W * H * 3 + 5))
    assert main(["encode", "--input", str(bad), "--width", str(W), "--height", str(H),
                 "--pix-fmt", "rgb24", "--checkpoint", str(trained[0]), "--out", str(tmp_path / "o")]) == 2
    assert main(["encode", "--input", str(tmp_path / "absent.rgb"), "--width", str(W), "--height",
                 str(H), "--pix-fmt", "rgb24", "--checkpoint", str(trained[0]),
                 "--out", str(tmp_path / "o")]) == 2


def test_decode_errors_exit_3(trained, workdir, tmp_path):
    bs = (workdir / "ai.bin")
    if not bs.exists():
        pytest.skip("needs the ai round trip")
    data = bs.read_bytes()
    cut = tmp_path / "cut.bin"
    cut.write_bytes(data[: len(data) // 2])
    assert main(["decode", "--bitstream", str(cut), "--checkpoint", str(trained[0]),
                 "--out", str(tmp_path / "x.rgb")]) == 3
    garbage = tmp_path / "garbage.bin"
    garbage.write_bytes(np.random.default_rng(0).integers(0, 256, 64, dtype=np.uint8).tobytes())
    assert main(["decode", "--bitstream", str(garbage), "--checkpoint", str(trained[0]),
                 "--out", str(tmp_path / "x.rgb")]) == 3
