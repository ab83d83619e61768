"""W8A8 drop of a desk-trained model, per-channel vs per-tensor weights.

Trains (or loads with --model) the small x2 model, calibrates min-max
encodings on a held-out calibration set and reports the fp -> int8 PSNR drop
for both weight granularities.
"""

import argparse

from quicksrnet import export
from quicksrnet.experiments import desk_splits, desk_train_config, quantized_reports, small_config, train_desk_model
from quicksrnet.quant import PER_CHANNEL, PER_TENSOR


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--model", help="evaluate this model instead of training one")
    p.add_argument("--iters", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    splits = desk_splits(2)
    if args.model:
        model = export.load(args.model)
    else:
        model = train_desk_model(small_config(seed=args.seed), splits, desk_train_config(args.iters, seed=args.seed)).model
    reports = quantized_reports(model, splits)

    fp = reports[PER_CHANNEL]
    print(f"fp {fp.mean_psnr('model'):.3f} dB  bicubic {fp.mean_psnr('bicubic'):.3f} dB")
    for gran in (PER_CHANNEL, PER_TENSOR):
        rep = reports[gran]
        print(f"{gran:>12}: int8 {rep.mean_psnr('int8'):.3f} dB  drop {rep.mean_fp_int8_delta():.3f} dB")


if __name__ == "__main__":
    main()
