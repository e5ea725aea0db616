import numpy as np
import pytest
import torch

from condvc.codec import Codec, FrameResult
from condvc.errors import ConfigurationError, InputError
from condvc.frame_model import FrameType
from condvc.training import (
    FORCE_ONE,
    FORCE_ZERO,
    FREE,
    MSSSIM_WEIGHTS,
    AlphaForcing,
    LossConfig,
    TextureClipDataset,
    TrainHyperparams,
    code_triplet,
    constant_color_clips,
    default_weights,
    force_alpha,
    hyperparams_from_config,
    iteration_losses,
    ms_ssim,
    parse_config_file,
    rd_loss,
    sample_triplets,
    train,
    translating_texture_clips,
)
from condvc.codec import ArchConfig
from oracles import ms_ssim_direct

TINY = ArchConfig(latent_channels=8, hyper_channels=4, hidden=8)


# -- MS-SSIM -------------------------------------------------------------


def test_self_similarity_is_one(rng):
    x = torch.from_numpy(rng.random((2, 3, 64, 64)))
    assert torch.all((ms_ssim(x, x, 3) - 1).abs() <= 1e-7)
    x32 = x.float()
    assert torch.all((ms_ssim(x32, x32, 3) - 1).abs() <= 1e-7)


def test_symmetry(rng):
    x = torch.from_numpy(rng.random((3, 64, 64)))
    y = torch.from_numpy(rng.random((3, 64, 64)))
    assert abs(float(ms_ssim(x, y, 3)) - float(ms_ssim(y, x, 3))) <= 1e-7


@pytest.mark.parametrize("seed", range(3))
def test_matches_direct_oracle(seed):
    rng = np.random.default_rng(seed)
    x = rng.random((3, 64, 64))
    y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
    got = float(ms_ssim(torch.from_numpy(x), torch.from_numpy(y), 3))
    assert abs(got - ms_ssim_direct(x, y, default_weights(3))) <= 1e-6


def test_five_scale_oracle_small_window():
    rng = np.random.default_rng(9)
    x = rng.random((1, 128, 128))
    y = np.clip(x + rng.normal(0, 0.2, x.shape), 0, 1)
    got = float(ms_ssim(torch.from_numpy(x), torch.from_numpy(y), 5))
    assert abs(got - ms_ssim_direct(x, y, default_weights(5))) <= 1e-6


def test_range_and_errors(rng):
    x = torch.from_numpy(rng.random((3, 32, 32)))
    y = torch.from_numpy(rng.random((3, 32, 32)))
    v = float(ms_ssim(x, y, 3))
    assert 0 < v < 1
    with pytest.raises(ConfigurationError):
        ms_ssim(x, y, 5)
    with pytest.raises(InputError):
        ms_ssim(x, y[:, :16], 1)
    with pytest.raises(ConfigurationError):
        ms_ssim(x, y, 3, weights=(0.5, 0.5))


def test_differentiable(rng):
    x = torch.from_numpy(rng.random((1, 3, 32, 32)))
    y = torch.from_numpy(rng.random((1, 3, 32, 32))).requires_grad_(True)
    ms_ssim(x, y, 3).sum().backward()
    assert torch.isfinite(y.grad).all() and y.grad.abs().sum() > 0


def test_default_weights():
    w = default_weights(3)
    assert sum(w) == pytest.approx(1.0)
    assert w[0] / w[1] == pytest.approx(MSSSIM_WEIGHTS[0] / MSSSIM_WEIGHTS[1])


# -- loss ----------------------------------------------------------------


def _result(x, bits_m, bits_c, recon=None):
    recon = x if recon is None else recon
    return FrameResult(recon, torch.tensor([float(bits_m)]), torch.tensor([float(bits_c)]), recon,
                       frame_type=FrameType.P)


def test_loss_config_validation():
    with pytest.raises(ConfigurationError):
        LossConfig(-1.0)
    with pytest.raises(ConfigurationError):
        LossConfig(0.1, 3, (0.2, 0.2, 0.2))
    assert sum(LossConfig(0.1, 5).msssim_weights) == pytest.approx(1.0)


def test_rd_loss_cases(rng):
    x = torch.from_numpy(rng.random((1, 3, 32, 32)))
    y = torch.from_numpy(rng.random((1, 3, 32, 32)))
    cfg = LossConfig(0.5, 3)
    n = 32 * 32
    perfect = rd_loss([_result(x, 100, 300)], [x], cfg)
    assert float(perfect) == pytest.approx(0.5 * 400 / n, abs=1e-9)
    zero_rate = rd_loss([_result(x, 0, 0, y)], [x], cfg)
    assert float(zero_rate) == pytest.approx(1 - float(ms_ssim(x, y, 3)), abs=1e-12)
    cfg0 = LossConfig(0.0, 3)
    assert float(rd_loss([_result(x, 5, 9, y)], [x], cfg0)) == float(rd_loss([_result(x, 50, 90, y)], [x], cfg0))
    more = rd_loss([_result(x, 100, 301)], [x], cfg)
    assert float(more) >= float(perfect)
    with pytest.raises(InputError):
        rd_loss([_result(x, 0, 0)], [x, x], cfg)


# -- alpha forcing -------------------------------------------------------


def test_force_alpha_halves(rng):
    alpha = torch.from_numpy(rng.random((2, 1, 4, 6)))
    out = force_alpha(alpha, 0, AlphaForcing(10))
    assert torch.all(out[..., :3] == 0) and torch.all(out[..., 3:] == 1)
    assert torch.equal(force_alpha(alpha, 10, AlphaForcing(10)), alpha)
    assert force_alpha(alpha, 0, None) is alpha


def test_force_alpha_gradients():
    mask = torch.tensor([[FORCE_ZERO, FREE], [FORCE_ONE, FREE]])
    alpha = torch.full((1, 1, 2, 2), 0.3, requires_grad=True)
    out = force_alpha(alpha, 0, AlphaForcing(5, mask))
    assert out[0, 0].tolist() == [[0.0, pytest.approx(0.3)], [1.0, pytest.approx(0.3)]]
    out.sum().backward()
    assert alpha.grad[0, 0].tolist() == [[0.0, 1.0], [0.0, 1.0]]
    with pytest.raises(InputError):
        force_alpha(torch.zeros(1, 1, 3, 3), 0, AlphaForcing(5, mask))


# -- data and loop -------------------------------------------------------


def test_texture_clips_translate():
    clip = translating_texture_clips(1, 4, 32, max_velocity=2, seed=5)[0]
    f0, f1 = clip.frames[0].data, clip.frames[1].data
    assert f0.shape == (3, 32, 32)
    found = False
    for dy in range(-2, 3):
        for dx in range(-2, 3):
            a = f1[:, max(0, -dy):32 - max(0, dy), max(0, -dx):32 - max(0, dx)]
            b = f0[:, max(0, dy):32 + min(0, dy), max(0, dx):32 + min(0, dx)]
            found |= bool(torch.equal(a, b))
    assert found


def test_lazy_dataset_deterministic():
    d = TextureClipDataset(50, seed=2)
    assert len(d) == 50
    assert torch.equal(d[7].frames[2].data, TextureClipDataset(50, seed=2)[7].frames[2].data)
    assert not torch.equal(d[7].frames[0].data, d[8].frames[0].data)
    with pytest.raises(IndexError):
        d[50]


def test_sample_triplets_shapes(rng):
    clips = translating_texture_clips(2, 4, 48, seed=1)
    frames = sample_triplets(clips, 3, 32, rng)
    assert len(frames) == 3 and frames[0].shape == (3, 3, 32, 32)
    with pytest.raises(InputError):
        sample_triplets(clips, 1, 64, rng)


def test_triplet_coding_order():
    torch.manual_seed(0)
    codec = Codec("AIVC", TINY)
    frames = [torch.rand(1, 3, 32, 32) for _ in range(3)]
    res = code_triplet(codec, frames)
    assert [r.frame_type for r in res] == [FrameType.I, FrameType.B, FrameType.P]


def test_hyperparams_validation():
    with pytest.raises(ConfigurationError):
        TrainHyperparams(crop=40)
    with pytest.raises(ConfigurationError):
        TrainHyperparams(crop=32, msssim_scales=5)
    assert TrainHyperparams(crop=64).msssim_scales == 3
    assert TrainHyperparams(crop=256).msssim_scales == 5


def test_seeded_determinism_and_logs(tmp_path):
    clips = translating_texture_clips(4, 4, 32, seed=0)
    hp = TrainHyperparams(iterations=3, batch_size=2, crop=32, arch=TINY, seed=11)
    a = train(clips, [0.1], "AIVC", hp, out_dir=tmp_path)
    b = train(clips, [0.1], "AIVC", hp)
    assert a.logs[0.1][0]["loss"] == b.logs[0.1][0]["loss"]
    assert all(np.isfinite(r["loss"]) for r in a.logs[0.1])
    assert {r["frame_type"] for r in a.logs[0.1]} == {"I", "P", "B"}
    csv_text = (tmp_path / "aivc_lambda0.1.csv").read_text().splitlines()
    assert csv_text[0] == "iteration,loss,D,R_m_bpp,R_c_bpp,frame_type"
    assert len(csv_text) == 1 + 3 * 3
    assert (tmp_path / "aivc_lambda0.1.pt").exists()
    assert len(iteration_losses(a.logs[0.1])) == 3


def test_only_present_networks_change():
    torch.manual_seed(0)
    clips = translating_texture_clips(2, 3, 32, seed=0)
    hp = TrainHyperparams(iterations=1, batch_size=1, crop=32, arch=TINY)
    res = train(clips, [0.1], "Conditional", hp)
    codec = res.codecs[0.1]
    assert codec.mnet is None
    assert all(not n.startswith("mnet") for n, _ in codec.named_parameters())


def test_mnet_receives_gradient_in_aivc():
    torch.manual_seed(0)
    codec = Codec("AIVC", TINY)
    frames = [torch.rand(2, 3, 32, 32) for _ in range(3)]
    res = code_triplet(codec, frames)
    rd_loss(res, frames, LossConfig(0.1, 3)).backward()
    grads = [p.grad for p in codec.mnet.parameters() if p.grad is not None]
    assert grads and sum(float(g.abs().sum()) for g in grads) > 0


def test_divergence_restores_last_finite_state(monkeypatch):
    import condvc.training as tr

    clips = translating_texture_clips(2, 3, 32, seed=0)
    hp = TrainHyperparams(iterations=6, batch_size=1, crop=32, arch=TINY, checkpoint_every=2)
    calls = {"n": 0}
    real = tr.loss_terms

    def poisoned(results, frames, cfg):
        calls["n"] += 1
        rows = real(results, frames, cfg)
        if calls["n"] == 4:
            rows[0]["D"] = rows[0]["D"] * float("nan")
        return rows

    monkeypatch.setattr(tr, "loss_terms", poisoned)
    res = train(clips, [0.1], "Residual", hp)
    assert res.diverged[0.1]
    assert len(iteration_losses(res.logs[0.1])) == 3
    assert all(torch.isfinite(p).all() for p in res.codecs[0.1].parameters())


@pytest.mark.slow
def test_constant_color_smoke():
    """On flat clips the texture rate collapses and distortion falls well below its start."""
    clips = constant_color_clips(8, 3, 32, seed=0)
    hp = TrainHyperparams(iterations=500, batch_size=2, crop=32, arch=TINY, lr=2e-3,
                          alpha_forcing_iterations=0)
    res = train(clips, [0.05], "Conditional", hp)
    rows = res.logs[0.05]
    first = [r for r in rows if r["iteration"] < 20]
    last = [r for r in rows if r["iteration"] >= 450]
    mean = lambda rs, k: float(np.mean([r[k] for r in rs]))  # noqa: E731
    assert mean(last, "R_c_bpp") < 0.2 * mean(first, "R_c_bpp")
    # MS-SSIM is nearly blind to a flat colour offset, so D levels off around
    # 0.03 per frame instead of reaching zero in this many iterations
    assert mean(last, "D") < 0.4 * mean(first, "D")


def test_config_file(tmp_path):
    p = tmp_path / "cfg.txt"
    p.write_text("# comment\nmode = Residual\nlambdas = 0.01, 0.1\ncrop = 32\niterations = 7\n"
                 "alpha_forcing = 3\nlatent_channels = 8\n")
    lams, mode, hp = hyperparams_from_config(parse_config_file(p))
    assert lams == [0.01, 0.1] and mode == "Residual"
    assert hp.iterations == 7 and hp.alpha_forcing_iterations == 3 and hp.arch.latent_channels == 8
    p.write_text("bogus line\n")
    with pytest.raises(ConfigurationError):
        parse_config_file(p)
    with pytest.raises(ConfigurationError):
        hyperparams_from_config({"colour": "red"})
