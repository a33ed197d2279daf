"""Fit the 8-sequence synthetic set with the conditioned head and report training-set F1/ER per seed."""

import argparse

from condsed.experiments import overfit_smoke


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--max-epochs", type=int, default=500)
    args = p.parse_args()
    ok = 0
    for seed in args.seeds:
        r = overfit_smoke(seed, args.max_epochs)
        good = r.f1 >= 0.95 and r.er <= 0.10
        ok += good
        print(f"seed {seed}: f1={r.f1:.4f} er={r.er:.4f} best_epoch={r.best_epoch} "
              f"time={r.seconds:.1f}s {'ok' if good else 'miss'}")
    print(f"{ok}/{len(args.seeds)} seeds reach f1>=0.95 and er<=0.10")


if __name__ == "__main__":
    main()
