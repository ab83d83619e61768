"""Naive vs proposed 1.5x heads trained for the same number of iterations.

Both heads start from the same f32-m2 body size and see the same batches.
The naive head runs a 3x model and average-pools its output; the proposed
head folds 2x2 input blocks into channels and emits 3x3 output blocks.
"""

import argparse
from fractions import Fraction

from quicksrnet.evaluate import evaluate
from quicksrnet.experiments import desk_splits, desk_train_config, small_config, train_desk_model


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--iters", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    scale = Fraction(3, 2)
    splits = desk_splits(scale)
    cfg = desk_train_config(args.iters, seed=args.seed)
    psnrs = {}
    for head in ("naive1p5x", "proposed1p5x"):
        run = train_desk_model(small_config(scale, head=head, seed=args.seed), splits, cfg)
        report = evaluate(run.model, splits.val)
        psnrs[head] = report.mean_psnr("model")
        print(
            f"{head:>13}: {psnrs[head]:.3f} dB  (bicubic {report.mean_psnr('bicubic'):.3f}, "
            f"nearest {report.mean_psnr('nearest'):.3f}; {run.seconds:.0f} s)",
            flush=True,
        )
    print(f"proposed - naive: {psnrs['proposed1p5x'] - psnrs['naive1p5x']:+.3f} dB")


if __name__ == "__main__":
    main()
