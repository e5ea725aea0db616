import csv
import json
import math

import numpy as np
import pytest
import torch

from condvc.codec import Codec, save_checkpoint
from condvc.errors import EvaluationError
from condvc.evalkit import (
    RDCurve,
    RDRecord,
    bd_rate,
    eval_scales,
    evaluate,
    msssim_db,
    rates,
    run_ablation,
)
from condvc.training import translating_texture_clips


def _curve(rates_bpp, qual_db, label="x"):
    return RDCurve([RDRecord(r, r, 1 - 10 ** (-q / 10), q, label) for r, q in zip(rates_bpp, qual_db)])


def test_msssim_db_values():
    assert msssim_db(0.99) == 20.0
    assert msssim_db(0.9) == 10.0
    assert msssim_db(0.999) == 30.0
    assert msssim_db(0.0) == 0.0
    assert msssim_db(1.0) == math.inf
    with pytest.raises(EvaluationError):
        msssim_db(1.0000001)
    vals = [msssim_db(v) for v in np.linspace(0, 0.999, 50)]
    assert all(b > a for a, b in zip(vals, vals[1:]))


def test_rates():
    assert rates(1e6, 10, 100, 100, 10) == (10.0, 1.0)
    assert rates(1e6, 1, 1000, 1000, 1) == (1.0, 1.0)
    assert rates(0, 10, 100, 100, 10) == (0.0, 0.0)
    b1, m1 = rates(5e5, 4, 10, 20, 25)
    b2, m2 = rates(5e5, 4, 10, 20, 50)
    assert b1 == b2 and m2 == 2 * m1
    with pytest.raises(EvaluationError):
        rates(10, 0, 1, 1, 1)


def test_curve_requires_increasing_rates():
    with pytest.raises(EvaluationError):
        _curve([0.1, 0.1, 0.3], [10, 11, 12])
    c = _curve([0.3, 0.1, 0.2], [12, 10, 11])
    assert c.rate.tolist() == [0.1, 0.2, 0.3]


@pytest.mark.parametrize("n", [2, 3, 4, 6])
def test_bd_rate_identity_and_offsets(n):
    r = np.geomspace(0.05, 0.8, n)
    q = np.linspace(8, 16, n) + 0.3 * np.sin(np.arange(n))
    a = _curve(r, q)
    assert abs(bd_rate(a, a)) <= 1e-9
    assert bd_rate(a, _curve(r * 0.9, q)) == pytest.approx(-10.0, abs=1e-9)
    assert bd_rate(a, _curve(r * 1.25, q)) == pytest.approx(25.0, abs=1e-9)
    x = bd_rate(a, _curve(r * 0.8, q))
    y = bd_rate(_curve(r * 0.8, q), a)
    assert (1 + x / 100) * (1 + y / 100) == pytest.approx(1.0, abs=1e-3)


def test_bd_rate_errors():
    a = _curve([0.1, 0.2, 0.3, 0.4], [10, 11, 12, 13])
    b = _curve([0.1, 0.2, 0.3, 0.4], [20, 21, 22, 23])
    with pytest.raises(EvaluationError):
        bd_rate(a, b)
    with pytest.raises(EvaluationError):
        bd_rate(a, _curve([0.1], [10]))


def test_bd_rate_better_curve_is_negative():
    r = np.array([0.1, 0.2, 0.4, 0.8])
    a = _curve(r, [10, 12, 14, 16])
    b = _curve(r, [11, 13, 15, 17])
    assert bd_rate(a, b) < 0


def test_evaluate_record():
    clip = translating_texture_clips(1, 2, 32, seed=0)[0]
    rec = evaluate(clip, clip, total_bits=2 * 32 * 32, fps=25)
    assert rec.msssim == pytest.approx(1.0, abs=1e-12)
    assert rec.rate_bpp == 1.0
    d = json.loads(rec.to_json())
    assert d["msssim_db"] == "inf" or d["msssim_db"] > 60
    assert eval_scales(64, 64) == 3 and eval_scales(200, 300) == 5 and eval_scales(16, 20) == 2


@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    out = tmp_path_factory.mktemp("abl")
    ckpts = {}
    for mode in ("AIVC", "Motion", "Conditional", "Residual"):
        for k, lam in enumerate((0.01, 0.05, 0.2)):
            torch.manual_seed(k)
            codec = Codec(mode)
            # different decoder gains give each lambda a distinct operating point
            for net in (codec.mnet, codec.cnet):
                if net is not None and net.gains.enabled:
                    for ft in ("I", "P", "B"):
                        net.gains.set(ft, 2.0 ** k, 2.0 ** -k)
            if not codec.cnet.gains.enabled:
                with torch.no_grad():
                    for prm in codec.cnet.analysis.parameters():
                        prm.mul_(2.0 ** k)
            p = out / f"{mode}_{lam}.pt"
            save_checkpoint(codec, p)
            ckpts[(mode, lam)] = p
    ckpts[("Motion", 0.5)] = out / "missing.pt"
    clips = translating_texture_clips(1, 5, 32, seed=4)
    report = run_ablation(ckpts, clips, 4, 4, out / "report")
    return report, out / "report", clips


def test_ablation_shape(ablation):
    report, _, _ = ablation
    assert set(report.curves) == {"AIVC", "Motion", "Conditional", "Residual"}
    assert report.absent == [("Motion", 0.5)]
    for curve in report.curves.values():
        assert len(curve.records) == 3
    assert report.bd_rates["Residual"] == pytest.approx(0.0, abs=1e-9)


def test_ablation_files(ablation):
    _, out, _ = ablation
    for name in ("rd_points.csv", "frames.csv", "bd_rates.csv", "report.json", "ablation.svg"):
        assert (out / name).exists()
    assert (out / "ablation.svg").read_text().lstrip().startswith("<?xml")


def test_ablation_byte_accounting(ablation):
    report, out, clips = ablation
    with open(out / "frames.csv") as fh:
        frames = list(csv.DictReader(fh))
    for pt in report.points:
        rows = [r for r in frames if r["mode"] == pt["mode"] and float(r["lambda"]) == pt["lambda"]]
        payload = sum(int(r["rate_motion_bits"]) + int(r["rate_texture_bits"]) for r in rows)
        header = sum(8 * int(r["frame_bytes"]) for r in rows if r["frame_type"] == "header")
        assert payload + header == pt["total_bits"]
        n_pix = sum(len(c) * c.height * c.width for c in clips)
        assert pt["rate_bpp"] == pt["total_bits"] / n_pix
