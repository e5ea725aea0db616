import pytest
import torch

from condvc.codec import (
    FRAME_HEADER_BYTES,
    SEQUENCE_HEADER_BYTES,
    TABLE1,
    Bitstream,
    Codec,
    CodecConfig,
    Mode,
    _ReferenceBuffer,
    decode_video,
    encode_video,
    load_checkpoint,
    pad_frame,
    save_checkpoint,
)
from condvc.errors import ConfigurationError, DecodeError, InputError, VersionError
from condvc.frame_model import Frame, FrameType, RawVideo, build_schedule
from condvc.training import translating_texture_clips

MODES = [m.value for m in Mode]


@pytest.fixture(scope="module")
def codecs():
    out = {}
    for m in MODES:
        torch.manual_seed(0)
        out[m] = Codec(m).eval()
    return out


@pytest.fixture(scope="module")
def video():
    return translating_texture_clips(1, 5, 32, seed=3)[0]


def test_table1_flags():
    expected = {
        "AIVC": dict(cnet_conditional=True, mnet_present=True, mnet_conditional=True,
                     motion_comp=True, skip=True, quant_gains=True),
        "Motion": dict(cnet_conditional=True, mnet_present=True, mnet_conditional=False,
                       motion_comp=True, skip=False, quant_gains=True),
        "Conditional": dict(cnet_conditional=True, mnet_present=False, mnet_conditional=False,
                            motion_comp=False, skip=False, quant_gains=True),
        "Residual": dict(cnet_conditional=False, mnet_present=False, mnet_conditional=False,
                         motion_comp=False, skip=False, quant_gains=False),
    }
    for mode, flags in expected.items():
        assert CodecConfig.from_mode(mode).flags() == flags
    assert set(TABLE1) == set(Mode)


def test_inconsistent_flags_rejected():
    with pytest.raises(ConfigurationError):
        CodecConfig(Mode.CONDITIONAL, True, True, False, False, False, True)
    with pytest.raises(ConfigurationError):
        CodecConfig.from_mode("Motion", alpha_masks_input=True)
    with pytest.raises(ConfigurationError):
        Codec("nonsense")


def test_networks_present_per_mode(codecs):
    assert codecs["Conditional"].mnet is None
    assert codecs["Residual"].mnet is None
    assert codecs["Residual"].cnet.conditional is False
    assert codecs["Motion"].mnet.conditional is False
    assert codecs["AIVC"].mnet.conditional is True
    assert len(list(codecs["Residual"].cnet.gains.parameters())) == 0


def test_motion_bundle_shapes_and_ranges(codecs):
    x = torch.rand(2, 3, 32, 32)
    bundle, bits = codecs["AIVC"].mnet_forward(x, torch.rand_like(x), torch.rand_like(x), "B")
    assert bundle.v_p.shape == (2, 2, 32, 32) and bundle.v_f.shape == (2, 2, 32, 32)
    assert bundle.beta.shape == (2, 1, 32, 32) and bundle.alpha.shape == (2, 1, 32, 32)
    for t in (bundle.alpha, bundle.beta):
        assert t.min() >= 0 and t.max() <= 1
    with torch.no_grad():
        a, _ = codecs["AIVC"].mnet_forward(x[:1], x[:1], x[:1], "B", mode="infer")
        b, _ = codecs["AIVC"].mnet_forward(x[:1], x[:1], x[:1], "B", mode="infer")
    assert torch.equal(a.v_p, b.v_p) and torch.equal(a.alpha, b.alpha)


@pytest.mark.parametrize("mode", ["train", "infer"])
def test_skip_identity(codecs, mode):
    x = torch.rand(1, 3, 32, 32)
    past = torch.rand_like(x)
    future = torch.rand_like(x)
    with torch.no_grad():
        res = codecs["AIVC"].code_frame(x, past, future, "B", mode=mode, alpha_override=0.0)
    assert torch.equal(res.reconstruction, res.prediction)


def test_i_frame_zero_prediction_and_residual_input(codecs):
    x = torch.rand(1, 3, 32, 32)
    for m in ("Conditional", "Residual"):
        with torch.no_grad():
            res = codecs[m].code_frame(x, None, None, "I", mode="train")
        assert torch.count_nonzero(res.prediction) == 0
    residual_in, _ = codecs["Residual"]._cnet_inputs(x, torch.zeros_like(x), None)
    assert torch.equal(residual_in, x)
    zero_in, _ = codecs["Residual"]._cnet_inputs(x, x.clone(), None)
    assert torch.count_nonzero(zero_in) == 0


def test_missing_reference_rejected(codecs):
    with pytest.raises(InputError):
        codecs["AIVC"].code_frame(torch.rand(1, 3, 32, 32), None, None, "P")
    with pytest.raises(InputError):
        codecs["AIVC"].code_frame(torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 32), None, "B")


def test_infer_rates_equal_payload_bytes(codecs):
    x = torch.rand(1, 3, 32, 32)
    res = codecs["AIVC"].code_frame(x, torch.rand_like(x), None, "P", mode="infer")
    assert res.rate_motion_bits.item() == 8 * res.payload.mnet_bytes
    assert res.rate_texture_bits.item() == 8 * res.payload.cnet_bytes


def test_pad_frame():
    x = torch.rand(3, 20, 37)
    y = pad_frame(x, 16)
    assert y.shape == (3, 32, 48)
    assert torch.equal(y[:, :20, :37], x)
    tiny = torch.rand(3, 5, 5)
    assert pad_frame(tiny, 16).shape == (3, 16, 16)


@pytest.mark.parametrize("mode", MODES)
@pytest.mark.parametrize("sched", ["AI", "LDP", "RA"])
def test_round_trip_bit_exact(codecs, video, mode, sched):
    s = build_schedule(sched, len(video), intra_period=4, gop_size=4)
    enc = encode_video(video, s, codecs[mode])
    data = enc.bitstream.to_bytes()
    dec = decode_video(data, codecs[mode])
    assert len(dec) == len(video)
    for i, f in enumerate(dec.frames):
        assert torch.equal(f.data, enc.reconstructions[i])


def test_stream_length_accounting(codecs, video):
    s = build_schedule("RA", len(video), intra_period=4, gop_size=4)
    enc = encode_video(video, s, codecs["AIVC"])
    stats = enc.frame_stats()
    total = SEQUENCE_HEADER_BYTES + sum(
        FRAME_HEADER_BYTES + (r["rate_motion_bits"] + r["rate_texture_bits"]) // 8 for r in stats)
    assert total == len(enc.bitstream.to_bytes()) == len(enc.bitstream)
    assert [r["display_index"] for r in stats] == [0, 4, 2, 1, 3]


def test_ra_reordering_to_display_order(codecs, video):
    s = build_schedule("RA", 5, intra_period=4, gop_size=4)
    enc = encode_video(video, s, codecs["Conditional"])
    assert [f.display_index for f in enc.bitstream.frames] == [0, 4, 2, 1, 3]
    dec = decode_video(enc.bitstream, codecs["Conditional"])
    for i in range(5):
        assert torch.equal(dec.frames[i].data, enc.reconstructions[i])


def test_padding_round_trip(codecs):
    v = translating_texture_clips(1, 3, 48, seed=2)[0]
    cropped = RawVideo(tuple(Frame(f.data[:, :40, :44]) for f in v.frames), v.fps)
    s = build_schedule("LDP", 3)
    enc = encode_video(cropped, s, codecs["AIVC"])
    dec = decode_video(enc.bitstream, codecs["AIVC"])
    assert (dec.height, dec.width) == (40, 44)
    assert torch.equal(dec.frames[2].data, enc.reconstructions[2])


def test_ai_frames_decode_independently(codecs, video):
    s = build_schedule("AI", len(video))
    codec = codecs["AIVC"]
    enc = encode_video(video, s, codec)
    for fb in enc.bitstream.frames:
        x = codec.decode_frame(fb.payload, (32, 32), None, None, FrameType.I)
        assert torch.equal(x[0], enc.reconstructions[fb.display_index])


def test_truncated_final_frame(codecs, video):
    s = build_schedule("RA", len(video), intra_period=4, gop_size=4)
    data = encode_video(video, s, codecs["AIVC"]).bitstream.to_bytes()
    with pytest.raises(DecodeError) as ei:
        decode_video(data[:-2], codecs["AIVC"])
    assert ei.value.frame_index == 3
    with pytest.raises(DecodeError):
        decode_video(data + b"\x00", codecs["AIVC"])
    with pytest.raises(DecodeError):
        decode_video(b"XXXX" + data[4:], codecs["AIVC"])


def test_corrupted_payload_is_decode_error(codecs, video):
    s = build_schedule("LDP", len(video))
    enc = encode_video(video, s, codecs["Conditional"])
    fb = enc.bitstream.frames[-1]
    # a stream with a byte removed from the latent and the length fixed up
    fb.payload.cnet_latent = fb.payload.cnet_latent[:-1]
    with pytest.raises(DecodeError) as ei:
        decode_video(enc.bitstream.to_bytes(), codecs["Conditional"])
    assert ei.value.frame_index == fb.display_index


def test_version_and_checkpoint_mismatch(codecs, video):
    s = build_schedule("AI", 2)
    short = RawVideo(video.frames[:2], video.fps)
    data = bytearray(encode_video(short, s, codecs["AIVC"]).bitstream.to_bytes())
    with pytest.raises(VersionError):
        decode_video(bytes(data), codecs["Motion"])
    data[4] = 99
    with pytest.raises(VersionError):
        decode_video(bytes(data), codecs["AIVC"])


def test_checkpoint_round_trip(tmp_path, codecs, video):
    p = tmp_path / "c.pt"
    save_checkpoint(codecs["Motion"], p)
    loaded = load_checkpoint(p)
    assert loaded.manifest_hash() == codecs["Motion"].manifest_hash()
    s = build_schedule("LDP", len(video))
    enc = encode_video(video, s, codecs["Motion"])
    dec = decode_video(enc.bitstream, loaded)
    assert torch.equal(dec.frames[-1].data, enc.reconstructions[len(video) - 1])
    with pytest.raises(ConfigurationError):
        load_checkpoint(tmp_path / "missing.pt")


def test_bitstream_parse_round_trip(codecs, video):
    s = build_schedule("RA", len(video), intra_period=4, gop_size=4)
    bs = encode_video(video, s, codecs["Residual"]).bitstream
    again = Bitstream.from_bytes(bs.to_bytes())
    assert again.to_bytes() == bs.to_bytes()
    assert again.header.fps == video.fps and again.header.gop_size == 4


def test_reference_buffer_causality():
    s = build_schedule("LDP", 3)
    buf = _ReferenceBuffer(s)
    with pytest.raises(DecodeError):
        buf.get(0, 1)
    buf.put(0, torch.zeros(1))
    buf.put(1, torch.ones(1))
    assert buf.peak <= 2


def test_encode_rejects_tiny_frames(codecs):
    v = RawVideo((Frame(torch.rand(3, 8, 8)),), 25.0)
    with pytest.raises(InputError):
        encode_video(v, build_schedule("AI", 1), codecs["AIVC"])
