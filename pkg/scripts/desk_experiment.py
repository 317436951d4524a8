"""Train the desk-scale variants and print a results table.

    python scripts/desk_experiment.py [--variants NAME ...] [--runs K] [--out DIR]
"""

import argparse
import logging

from sine_dae.experiments import DESK_RUNS, DESK_VARIANTS, desk_split, run_desk


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--variants", nargs="*", default=list(DESK_VARIANTS), help="subset of variant names")
    p.add_argument("--runs", type=int, default=DESK_RUNS, help="seeds per variant, pooled into one median")
    p.add_argument("--out", default=None, help="write checkpoints under OUT/<variant>/")
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    train_tracks, test_tracks = desk_split()
    header = f"{'variant':26s} {'recon':>7s} {'BM':>7s} {'STFT BM':>8s} {'mixture':>8s} {'TV(A_m)':>8s} {'time':>6s}"
    print(header)
    print("-" * len(header))
    for name in args.variants:
        out = None if args.out is None else f"{args.out}/{name.replace(' ', '_').replace('^', '')}"
        run = run_desk(name, DESK_VARIANTS[name], train_tracks, test_tracks, out, args.runs)
        print(f"{name:26s} {run.median('reconstruction_si_sdr'):7.2f} {run.median('bm_si_sdr'):7.2f} "
              f"{run.median('stft_bm_si_sdr'):8.2f} {run.median('mixture_si_sdr'):8.2f} "
              f"{run.median('tv_mixture'):8.3f} {run.seconds:5.0f}s", flush=True)


if __name__ == "__main__":
    main()
