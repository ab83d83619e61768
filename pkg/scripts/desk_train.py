"""Train the small x2 model at desk scale and compare it with bicubic and nearest.

    python scripts/desk_train.py --iters 5000 --out runs/small
"""

import argparse
import sys

from quicksrnet import train
from quicksrnet.evaluate import evaluate
from quicksrnet.experiments import desk_splits, desk_train_config, small_config, train_desk_model


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--iters", type=int, default=5000)
    p.add_argument("--lr", type=float, default=train.DESK_LR)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log-every", type=int, default=500)
    p.add_argument("--out", help="write the trained checkpoint here")
    args = p.parse_args(argv)

    splits = desk_splits(2)
    cfg = desk_train_config(args.iters, lr_initial=args.lr, seed=args.seed)

    def log(step, lr, loss):
        if args.log_every and step % args.log_every == 0:
            print(f"step {step:5d}  lr {lr:.2e}  loss {loss:.5f}", file=sys.stderr, flush=True)

    run = train_desk_model(small_config(seed=args.seed), splits, cfg, log=log)
    report = evaluate(run.model, splits.val)
    print(report.format_table())
    print(f"\nmodel - bicubic: {report.delta('model', 'bicubic'):+.3f} dB   ({run.seconds:.0f} s)")
    if args.out:
        train.save_checkpoint(run.model, run.result.state, args.out)


if __name__ == "__main__":
    main()
