"""Batch command-line interface: ``qsr <subcommand> ...``.

Subcommands: init, upscale, train, quantize, export-dcr, eval. Errors go to
stderr as ``qsr-error[<Kind>]: <message>`` and exit with status 1; argument
errors exit with status 2. ``QSR_THREADS`` caps the BLAS thread pool.
"""

from __future__ import annotations

import os
import sys

# must run before numpy loads its BLAS
if os.environ.get("QSR_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["QSR_THREADS"])

import argparse  # noqa: E402
import json  # noqa: E402
from fractions import Fraction  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import export, quant, train  # noqa: E402
from .errors import QsrError  # noqa: E402
from .evaluate import EvalOptions, evaluate, load_images, load_pairs, load_png, save_png  # noqa: E402
from .model import DEFAULT_STD, ONE_AND_HALF, ModelConfig, build, forward  # noqa: E402

HEAD_ALIASES = {"standard": "standard", "naive": "naive1p5x", "proposed": "proposed1p5x"}


def parse_scale(text: str) -> Fraction:
    try:
        frac = Fraction(text)
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"invalid scale {text!r}")
    if frac not in (2, 3, 4, ONE_AND_HALF):
        raise argparse.ArgumentTypeError(f"scale must be 2, 3, 4 or 1.5; got {text}")
    return frac


def _crop_for_model(img: np.ndarray, config: ModelConfig) -> np.ndarray:
    """1.5x models need even input dims; drop the last row/column if odd."""
    if config.scale != ONE_AND_HALF:
        return img
    h, w = img.shape[-2:]
    return img[..., : h - h % 2, : w - w % 2]


# -- subcommands ------------------------------------------------------------------


def cmd_init(args) -> int:
    head = HEAD_ALIASES[args.head] if args.head else ("proposed1p5x" if args.scale == ONE_AND_HALF else "standard")
    config = ModelConfig(
        f=args.f,
        m=args.m,
        scale=args.scale,
        head=head,
        anchor_residual=args.anchor,
        init=args.init,
        std=args.std,
        seed=args.seed,
    )
    model = build(config)
    mpath, _ = export.save(model, args.out)
    print(f"wrote {config.label} to {mpath}")
    return 0


def cmd_upscale(args) -> int:
    model = export.load(args.model)
    encodings = quant.load_encodings(args.quant_encodings) if args.quant_encodings else None
    img = _crop_for_model(load_png(args.input), model.config)
    if encodings is not None:
        out = quant.quantized_forward(model, encodings, None, img)
    else:
        out = forward(model, img)
    save_png(out, args.output)
    print(f"wrote {out.shape[3]}x{out.shape[2]} image to {args.output}")
    return 0


def _train_config(args) -> train.TrainConfig:
    if args.desk_scale:
        iters = args.iters if args.iters is not None else 5000
        base = train.TrainConfig.desk_scale(iters)
        batch = 8
    else:
        iters = args.iters if args.iters is not None else train.FULL_ITERATIONS
        base = train.TrainConfig.full_scale(iterations=iters)
        batch = train.FULL_BATCH_SIZE
    return train.TrainConfig(
        iterations=iters,
        batch_size=args.batch if args.batch is not None else batch,
        patch_size=args.patch,
        lr_initial=args.lr if args.lr is not None else base.lr_initial,
        lr_decay_factor=args.decay_factor,
        lr_decay_every=args.decay_every if args.decay_every is not None else base.lr_decay_every,
        seed=args.seed,
    )


def cmd_train(args) -> int:
    cfg = _train_config(args)
    if args.resume:
        model, state = train.load_checkpoint(args.model)
    else:
        model, state = export.load(args.model), None
    data = load_images(args.data)

    def log(step, lr, loss):
        if args.log_every and step % args.log_every == 0:
            print(f"step {step:>7d}  lr {lr:.3g}  loss {loss:.6f}", file=sys.stderr)

    result = train.train_loop(model, data, cfg, state=state, log=log)
    train.save_checkpoint(result.model, result.state, args.out)
    if args.curve:
        train.write_curve(result.curve, args.curve)
    last = f", final loss {result.curve[-1][2]:.6f}" if result.curve else ""
    print(f"trained {cfg.iterations} iterations{last}; checkpoint {export.model_paths(args.out)[0]}")
    return 0


def cmd_quantize(args) -> int:
    scheme = quant.QuantScheme(weight_granularity=args.scheme, bitwidth=args.bitwidth)
    model = export.load(args.model)
    calib = [_crop_for_model(img, model.config) for img in load_images(args.calib_dir)]
    encodings = quant.build_encodings(model, calib, scheme)
    # smoke run so a broken file is never written
    quant.quantized_forward(model, encodings, scheme, calib[0][None])
    quant.save_encodings(encodings, args.out_encodings)
    print(f"wrote {args.scheme} encodings for {len(encodings.params)} layers to {args.out_encodings}")
    return 0


def _default_encodings_out(out: str) -> Path:
    mpath, _ = export.model_paths(out)
    return mpath.with_name(mpath.name[: -len(".qsr.json")] + ".encodings.json")


def cmd_export_dcr(args) -> int:
    model = export.load(args.model)
    encodings = quant.load_encodings(args.encodings) if args.encodings else None
    if encodings is not None:
        quant.check_encodings(model, encodings)
    dcr_model = export.to_dcr(model)
    dcr_enc = export.encodings_to_dcr(model, encodings) if encodings is not None else None
    size = 16
    check = export.dcr_self_check(model, dcr_model, encodings, dcr_enc, n_inputs=10, size=size, seed=args.seed)
    print("self-check " + json.dumps(check, sort_keys=True))
    if any(v != 0.0 for v in check.values()):
        raise QsrError(f"DCR self-check failed: {check}")
    mpath, _ = export.save(dcr_model, args.out)
    print(f"wrote DCR model to {mpath}")
    if dcr_enc is not None:
        enc_out = Path(args.out_encodings) if args.out_encodings else _default_encodings_out(args.out)
        quant.save_encodings(dcr_enc, enc_out)
        print(f"wrote DCR encodings to {enc_out}")
    return 0


def cmd_eval(args) -> int:
    model = export.load(args.model)
    encodings = quant.load_encodings(args.encodings) if args.encodings else None
    pairs = load_pairs(args.data, model.config.scale)
    report = evaluate(model, pairs, EvalOptions(encodings=encodings, luma_only=args.luma))
    print(report.format_table())
    if args.report:
        report.to_csv(args.report)
    return 0


# -- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qsr", description="Plain-conv super-resolution toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init", help="build a model and write it to disk")
    s.add_argument("--f", type=int, default=32, help="feature channels (default: 32)")
    s.add_argument("--m", type=int, default=2, help="intermediate conv blocks (default: 2)")
    s.add_argument("--scale", type=parse_scale, default=Fraction(2), help="2, 3, 4 or 1.5 (default: 2)")
    s.add_argument("--head", choices=sorted(HEAD_ALIASES), help="head for 1.5x: naive or proposed (default)")
    s.add_argument("--anchor", action="store_true", help="add the anchor residual before depth-to-space")
    s.add_argument("--init", choices=["identity", "random"], default="identity")
    s.add_argument("--std", type=float, default=DEFAULT_STD, help=f"Gaussian init std (default: {DEFAULT_STD})")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output model path (writes <out>.qsr.json/.bin)")
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("upscale", help="super-resolve one PNG")
    s.add_argument("--model", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", dest="output", required=True)
    s.add_argument("--quant-encodings", help="run the W8A8 simulation with these encodings")
    s.set_defaults(func=cmd_upscale)

    s = sub.add_parser("train", help="train a model on a directory of HR PNGs")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--iters", type=int, help=f"iterations (default: {train.FULL_ITERATIONS}, 5000 with --desk-scale)")
    s.add_argument("--batch", type=int, help=f"batch size (default: {train.FULL_BATCH_SIZE}, 8 with --desk-scale)")
    s.add_argument("--patch", type=int, default=48, help="LR patch size (default: 48)")
    s.add_argument("--lr", type=float, help=f"initial learning rate (default: {train.FULL_LR}, {train.DESK_LR} with --desk-scale)")
    s.add_argument("--decay-every", type=int, help="iterations between LR halvings (default: iters/5)")
    s.add_argument("--decay-factor", type=float, default=train.FULL_LR_DECAY_FACTOR)
    s.add_argument("--desk-scale", action="store_true", help="shrink the schedule for a CPU run")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--curve", help="write the loss curve CSV here")
    s.add_argument("--resume", action="store_true", help="continue from the optimizer state saved next to --model")
    s.add_argument("--log-every", type=int, default=0)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("quantize", help="calibrate W8A8 encodings")
    s.add_argument("--model", required=True)
    s.add_argument("--calib-dir", required=True)
    s.add_argument("--scheme", choices=list(quant.GRANULARITIES), default=quant.PER_CHANNEL)
    s.add_argument("--bitwidth", type=int, default=8)
    s.add_argument("--out-encodings", required=True)
    s.set_defaults(func=cmd_quantize)

    s = sub.add_parser("export-dcr", help="rewrite a model (and encodings) for DCR depth-to-space")
    s.add_argument("--model", required=True)
    s.add_argument("--encodings")
    s.add_argument("--out", required=True)
    s.add_argument("--out-encodings")
    s.add_argument("--seed", type=int, default=0, help="seed for the self-check inputs")
    s.set_defaults(func=cmd_export_dcr)

    s = sub.add_parser("eval", help="PSNR/SSIM report against bicubic and nearest baselines")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True, help="directory with HR/ (and optionally LR/) PNGs")
    s.add_argument("--encodings")
    s.add_argument("--report", help="CSV output path")
    s.add_argument("--luma", action="store_true", help="compute metrics on BT.601 luma")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except QsrError as exc:
        print(f"qsr-error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"qsr-error[IOError]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
