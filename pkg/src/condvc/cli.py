"""Command line entry points: train, encode, decode, eval, ablate.

Exit codes: 0 success, 1 usage/configuration error, 2 data error,
3 decode/bitstream error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import evalkit, training
from .codec import decode_video, encode_video, load_checkpoint, read_bitstream, write_bitstream
from .errors import CodecError, ConfigurationError, DecodeError, InputError
from .frame_model import RawVideo, ScheduleConfig, build_schedule, load_raw_video, save_raw_video

log = logging.getLogger("condvc")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DECODE = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, default=str))


def _load_dataset(cfg: dict) -> list[RawVideo]:
    data = cfg.get("data", "synthetic")
    if data == "synthetic":
        return training.translating_texture_clips(
            int(cfg.get("clips", 32)), int(cfg.get("frames", 8)), int(cfg.get("size", 64)),
            seed=int(cfg.get("seed", 0)))
    try:
        width, height = int(cfg["width"]), int(cfg["height"])
    except KeyError as exc:
        raise ConfigurationError(f"raw training data needs {exc.args[0]}") from exc
    fmt = cfg.get("pix_fmt", "rgb24")
    fps = float(cfg.get("fps", 25))
    return [load_raw_video(p, width, height, fmt, fps) for p in data.split()]


def cmd_train(args) -> int:
    cfg = training.parse_config_file(args.config)
    data_keys = {"width", "height", "pix_fmt", "fps"}
    lams, mode, hp = training.hyperparams_from_config({k: v for k, v in cfg.items() if k not in data_keys})
    out = Path(args.out or cfg.get("out", "checkpoints"))
    dataset = _load_dataset(cfg)
    log.info("training %s for lambdas %s with %s", mode, lams, training.hyperparams_dict(hp))
    res = training.train(dataset, lams, mode, hp, out_dir=out, progress=True)
    _emit({
        "mode": mode,
        "hyperparams": training.hyperparams_dict(hp),
        "checkpoints": {str(k): str(v) for k, v in res.checkpoints.items()},
        "diverged": {str(k): v for k, v in res.diverged.items()},
        "seconds": res.seconds,
    })
    return EXIT_DATA if any(res.diverged.values()) else EXIT_OK


def cmd_encode(args) -> int:
    codec = load_checkpoint(args.checkpoint)
    video = load_raw_video(args.input, args.width, args.height, args.pix_fmt, args.fps)
    sched = build_schedule(ScheduleConfig(args.config.upper()), len(video), args.intra_period,
                           args.gop, fps=args.fps)
    with torch.no_grad():
        enc = encode_video(video, sched, codec)
    write_bitstream(enc.bitstream, args.out)
    total_bits = 8 * len(enc.bitstream)
    rec = evalkit.evaluate(torch.stack([enc.reconstructions[i] for i in range(len(video))]),
                           video, total_bits, args.fps, codec.config.mode.value)
    _emit({"bitstream": str(args.out), "bytes": len(enc.bitstream), "frames": enc.frame_stats(),
           "rd": json.loads(rec.to_json())})
    return EXIT_OK


def cmd_decode(args) -> int:
    codec = load_checkpoint(args.checkpoint)
    stream = read_bitstream(args.bitstream)
    video = decode_video(stream, codec)
    save_raw_video(video, args.out, args.pix_fmt)
    _emit({"frames": len(video), "width": video.width, "height": video.height,
           "fps": video.fps, "out": str(args.out), "pix_fmt": args.pix_fmt})
    return EXIT_OK


def cmd_eval(args) -> int:
    orig = load_raw_video(args.orig, args.width, args.height, args.orig_pix_fmt, args.fps)
    recon = load_raw_video(args.recon, args.width, args.height, args.recon_pix_fmt, args.fps)
    if len(orig) != len(recon):
        raise InputError(f"original has {len(orig)} frames, reconstruction {len(recon)}")
    bits = None
    if args.bitstream:
        bits = 8 * Path(args.bitstream).stat().st_size
    rec = evalkit.evaluate(recon, orig, bits, args.fps, args.label or "")
    print(rec.to_json())
    return EXIT_OK


def cmd_ablate(args) -> int:
    """Manifest (JSON): {"checkpoints": [{"mode", "lambda", "path"}], "eval": {...},
    "intra_period": 4, "gop": 4, "out": dir}. ``eval`` is either
    {"synthetic": {"clips", "frames", "size", "seed"}} or {"clips": [{"path",
    "width", "height", "pix_fmt", "fps"}]}."""
    manifest_path = Path(args.manifest)
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"manifest is not valid JSON: {exc}") from exc
    base = manifest_path.parent
    ckpts = {}
    for entry in manifest.get("checkpoints", []):
        path = Path(entry["path"])
        ckpts[(entry["mode"], float(entry["lambda"]))] = path if path.is_absolute() else base / path
    ev = manifest.get("eval", {"synthetic": {}})
    if "synthetic" in ev:
        s = ev["synthetic"]
        clips = training.translating_texture_clips(int(s.get("clips", 4)), int(s.get("frames", 8)),
                                                   int(s.get("size", 64)), seed=int(s.get("seed", 1000)))
    else:
        clips = [load_raw_video(base / c["path"], int(c["width"]), int(c["height"]),
                                c.get("pix_fmt", "rgb24"), float(c.get("fps", 25)))
                 for c in ev.get("clips", [])]
    out = Path(args.out or manifest.get("out", base / "ablation"))
    report = evalkit.run_ablation(ckpts, clips, int(manifest.get("intra_period", 4)),
                                  int(manifest.get("gop", 4)), out)
    _emit({"out": str(out), "bd_rates": report.bd_rates,
           "absent": [{"mode": m, "lambda": lam} for m, lam in report.absent]})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="condvc", description="Conditional-coding learned video codec.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train one codec per lambda from a key = value config")
    t.add_argument("config")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("encode", help="encode a raw video")
    e.add_argument("--input", required=True)
    e.add_argument("--width", type=int, required=True)
    e.add_argument("--height", type=int, required=True)
    e.add_argument("--fps", type=float, default=25.0)
    e.add_argument("--pix-fmt", default="yuv420p8", choices=("rgb24", "yuv420p8", "yuv444p8"))
    e.add_argument("--config", default="ra", choices=("ai", "ldp", "ra", "AI", "LDP", "RA"))
    e.add_argument("--intra-period", type=int)
    e.add_argument("--gop", type=int)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", help="decode a bitstream to a raw video")
    d.add_argument("--bitstream", required=True)
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--pix-fmt", default="rgb24", choices=("rgb24", "yuv444p8"))
    d.set_defaults(func=cmd_decode)

    v = sub.add_parser("eval", help="MS-SSIM (and rate) of a reconstruction")
    v.add_argument("--recon", required=True)
    v.add_argument("--orig", required=True)
    v.add_argument("--width", type=int, required=True)
    v.add_argument("--height", type=int, required=True)
    v.add_argument("--fps", type=float, default=25.0)
    v.add_argument("--orig-pix-fmt", default="rgb24", choices=("rgb24", "yuv420p8", "yuv444p8"))
    v.add_argument("--recon-pix-fmt", default="rgb24", choices=("rgb24", "yuv420p8", "yuv444p8"))
    v.add_argument("--bitstream", help="bitstream whose size gives the rate")
    v.add_argument("--label")
    v.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run the mode ablation from a JSON manifest")
    a.add_argument("--manifest", required=True)
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DecodeError as exc:
        print(f"decode error: {exc}", file=sys.stderr)
        return EXIT_DECODE
    except CodecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
