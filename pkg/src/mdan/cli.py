"""Command-line interface: ``mdan <command> ...``.

Exit codes: 0 success, 2 input validation failure, 3 numerical failure.
"""

import argparse
import configparser
import csv
import logging
import sys
from pathlib import Path

from mdan.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from mdan.codec_sim import simulate_compression
from mdan.metrics import (
    CurveError,
    DegenerateCurveError,
    RDCurve,
    bd_psnr,
    bd_rate,
    yuv_weighted,
)
from mdan.model import MdanConfig, init_params, param_count, zero_params
from mdan.pipeline import (
    QP_BANDS,
    PipelineError,
    QpBandRegistry,
    TilingPlan,
    apply_sequence,
    filter_sequence,
)
from mdan.training import (
    AdamState,
    TrainConfig,
    TrainData,
    TrainingDivergence,
    format_history,
    gradient_check,
    train,
)
from mdan.yuv import YuvFormatError, read_yuv420, write_yuv420

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("mdan")


class InputError(ValueError):
    pass


class NumericalFailure(RuntimeError):
    pass


def parse_size(text):
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like WxH, got {text!r}")


def fusion_weights_expected(channels):
    r = channels // 8
    return channels * r + 2 * r * channels + channels * channels


# ---------------------------------------------------------------------------
# commands


def cmd_degrade(args):
    w, h = args.size
    frames = read_yuv420(args.input, w, h, args.depth)
    write_yuv420([simulate_compression(f, args.qp) for f in frames], args.out)
    print(f"wrote {len(frames)} frames at qp {args.qp} to {args.out}")


def load_train_cfg(path):
    parser = configparser.ConfigParser()
    if path is not None and not parser.read(path):
        raise InputError(f"cannot read training config {path}")
    m = parser["model"] if parser.has_section("model") else {}
    t = parser["train"] if parser.has_section("train") else {}
    model = MdanConfig(
        channels=int(m.get("channels", 64)),
        mdsa_blocks=int(m.get("mdsa_blocks", 8)),
        p=int(m.get("p", 2)),
        q=int(m.get("q", 1)),
    )
    fields = {
        "patch_size": int,
        "batch_size": int,
        "learning_rate": float,
        "steps": int,
        "seed": int,
        "beta1": float,
        "beta2": float,
        "eps": float,
    }
    kwargs = {k: conv(t[k]) for k, conv in fields.items() if k in t}
    return model, kwargs


def cmd_train(args):
    w, h = args.size
    model_cfg, kwargs = load_train_cfg(args.config)
    if args.steps is not None:
        kwargs["steps"] = args.steps
    config = TrainConfig(qp_band=args.qp_band, **kwargs)
    rec = read_yuv420(args.rec, w, h, args.depth)
    org = read_yuv420(args.org, w, h, args.depth)
    plane = {"y": 0, "u": 1, "v": 2}[args.plane]
    data = TrainData([f.planes()[plane] for f in rec], [f.planes()[plane] for f in org], args.depth)

    params = state = None
    if args.resume:
        params, extra = load_checkpoint(args.resume)
        if params.config != model_cfg and args.config is not None:
            raise InputError(f"resume checkpoint config {params.config} differs from {model_cfg}")
        state = AdamState.from_extra(extra, params)
        model_cfg = params.config
    result = train(config, data, model_cfg, params=params, state=state,
                   checkpoint_path=args.out, log_every=args.log_every)
    if args.log:
        Path(args.log).write_text(format_history(result.history))
    if result.history:
        first, last = result.history[0][1], result.history[-1][1]
        print(f"trained {len(result.history)} steps: loss {first:.6e} -> {last:.6e}")
    print(f"checkpoint written to {args.out}")


def cmd_init(args):
    config = MdanConfig(args.channels, args.blocks, args.p, args.q)
    params = zero_params(config) if args.zero else init_params(config, args.seed)
    params.qp_band = args.qp_band
    save_checkpoint(args.out, params)
    print(f"{'zero' if args.zero else 'random'} checkpoint written to {args.out}")


def _registry(path):
    return QpBandRegistry.from_file(path)


def cmd_filter(args):
    w, h = args.size
    if args.scale and not args.org:
        raise InputError("--scale needs --org (the encoder fits factors against the original)")
    report = filter_sequence(
        args.rec, args.out, args.sidecar, args.qp, _registry(args.models), w, h, args.depth,
        org_path=args.org, enable_scaling=args.scale,
        tiling=TilingPlan(args.tile, args.overlap), fit_offset=args.alpha_fit == "offset",
        guard=not args.no_guard,
    )
    if args.report:
        report.write(args.report)
    else:
        print("\n".join(report.lines()))


def cmd_apply(args):
    w, h = args.size
    frames = apply_sequence(args.rec, args.sidecar, args.out, args.qp, _registry(args.models),
                            w, h, args.depth, tiling=TilingPlan(args.tile, args.overlap))
    print(f"reproduced {len(frames)} frames into {args.out}")


def read_rd_csv(path):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"qp", "rate", "psnr_y", "psnr_u", "psnr_v"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise InputError(f"{path}: CSV header must contain {sorted(need)}")
        for row in reader:
            try:
                rows.append({k: float(row[k]) for k in need})
            except (TypeError, ValueError):
                raise InputError(f"{path}: malformed row {row}")
    return {
        plane: RDCurve.from_arrays([r["rate"] for r in rows], [r[f"psnr_{plane}"] for r in rows])
        for plane in "yuv"
    }


def cmd_eval(args):
    anchor, test = read_rd_csv(args.anchor), read_rd_csv(args.test)
    rates = {p: bd_rate(anchor[p], test[p]) for p in "yuv"}
    gains = {p: bd_psnr(anchor[p], test[p]) for p in "yuv"}
    print("plane  bd_rate(%)  bd_psnr(dB)")
    for p in "yuv":
        print(f"{p.upper():5s}  {rates[p]:10.4f}  {gains[p]:11.4f}")
    print(f"{'YUV':5s}  {yuv_weighted(*rates.values()):10.4f}  {yuv_weighted(*gains.values()):11.4f}")


def cmd_gradcheck(args):
    config = MdanConfig(channels=args.channels, mdsa_blocks=1)
    report = gradient_check(config, tolerance=args.tolerance, seed=args.seed, size=args.size)
    if args.verbose:
        for name, err in report.errors.items():
            print(f"{err:.3e}  {name}")
    print(report.summary())
    if not report.passed:
        raise NumericalFailure("gradient check failed")


def cmd_info(args):
    params, extra = load_checkpoint(args.ckpt)
    cfg = params.config
    counts = param_count(params)
    print(f"config: channels={cfg.channels} mdsa_blocks={cfg.mdsa_blocks} p={cfg.p} q={cfg.q} "
          f"in_planes={cfg.in_planes}")
    print(f"qp_band: {params.qp_band if params.qp_band is not None else '-'}  seed: {params.seed}")
    for group, c in counts.items():
        print(f"  {group:28s} weights={c['weights']:>9d} biases={c['biases']:>6d}")
    expected = fusion_weights_expected(cfg.channels)
    for k in range(cfg.mdsa_blocks):
        fusion = counts[f"body.{k}.mdsa.fusion"]
        assert fusion["weights"] == expected and fusion["biases"] == 0, (
            f"fusion block {k}: {fusion} != {expected} weights"
        )
    if cfg.channels == 64:
        assert expected == 5632
    print(f"fusion weights per MDSA block: {expected} (checked)")
    if extra:
        print(f"extra tensors: {len(extra)} (optimizer state)")


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="mdan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def video_args(p, depth_default=8):
        p.add_argument("--size", type=parse_size, required=True, metavar="WxH")
        p.add_argument("--depth", type=int, choices=(8, 10), default=depth_default)

    def tile_args(p):
        p.add_argument("--tile", type=int, default=128)
        p.add_argument("--overlap", type=int, default=8)

    p = sub.add_parser("degrade", help="simulate codec distortion with blockwise DCT quantization")
    p.add_argument("--in", dest="input", required=True)
    video_args(p)
    p.add_argument("--qp", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("train", help="train one per-QP-band model")
    p.add_argument("--rec", required=True)
    p.add_argument("--org", required=True)
    video_args(p)
    p.add_argument("--qp-band", type=int, choices=QP_BANDS, required=True)
    p.add_argument("--config")
    p.add_argument("--plane", choices=("y", "u", "v"), default="y")
    p.add_argument("--steps", type=int)
    p.add_argument("--resume")
    p.add_argument("--log")
    p.add_argument("--log-every", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("init", help="write a zero or randomly initialized checkpoint")
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--blocks", type=int, default=8)
    p.add_argument("--p", type=int, default=2)
    p.add_argument("--q", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--qp-band", type=int, choices=QP_BANDS)
    p.add_argument("--zero", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("filter", help="encoder side: filter, fit scaling factors, write sidecar")
    p.add_argument("--rec", required=True)
    p.add_argument("--org")
    p.add_argument("--scale", action="store_true")
    p.add_argument("--alpha-fit", choices=("origin", "offset"), default="origin")
    p.add_argument("--no-guard", action="store_true",
                   help="always signal the closed-form factor, even if unity or zero is better")
    video_args(p)
    p.add_argument("--qp", type=int, required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sidecar", required=True)
    p.add_argument("--report")
    tile_args(p)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("apply", help="decoder side: reproduce filtered output from rec + sidecar")
    p.add_argument("--rec", required=True)
    p.add_argument("--sidecar", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--out", required=True)
    video_args(p)
    p.add_argument("--qp", type=int, required=True)
    tile_args(p)
    p.set_defaults(func=cmd_apply)

    p = sub.add_parser("eval", help="BD-rate / BD-PSNR from two RD CSV files")
    p.add_argument("--anchor", required=True)
    p.add_argument("--test", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of a reduced model")
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("info", help="describe a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=cmd_info)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (TrainingDivergence, DegenerateCurveError, NumericalFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, YuvFormatError, PipelineError, CheckpointError, CurveError,
            ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
