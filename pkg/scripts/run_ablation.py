"""Loss ablation: full vs regular_loss on a 600-clip synthetic set.

    python scripts/run_ablation.py                      # full vs regular_loss, 3 training seeds
    python scripts/run_ablation.py --variants full no_coarse non_hierarchical regular_loss
"""
import argparse
import json
import logging
import math

from binloc.experiments import ablation_experiment
from binloc.model import VARIANTS


def fmt(x):
    return "n/a" if math.isnan(x) else f"{x:6.2f}"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--variants", nargs="+", default=["full", "regular_loss"], choices=VARIANTS)
    ap.add_argument("--per-talker", type=int, default=200)
    ap.add_argument("--snrs", type=float, nargs="+", default=[20, 10, 5, 0])
    ap.add_argument("--seed", type=int, default=0, help="dataset seed")
    ap.add_argument("--train-seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--max-epochs", type=int, default=100)
    ap.add_argument("--json", help="write pooled reports here")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    res = ablation_experiment(
        variants=tuple(args.variants), per_talker=args.per_talker, snrs=tuple(args.snrs),
        seed=args.seed, train_seeds=tuple(args.train_seeds), max_epochs=args.max_epochs,
    )
    print(f"{'variant':<18}{'acc%':>8}{'F1%':>8}{'azi':>8}{'ele':>8}{'n_valid':>9}")
    for v, r in res.reports.items():
        print(f"{v:<18}{100 * r.detection_accuracy:8.2f}{100 * r.f1:8.2f}{fmt(r.azimuth_dae_deg):>8}"
              f"{fmt(r.elevation_dae_deg):>8}{r.n_valid:9d}")
    print(f"best epochs {res.epochs}; {res.seconds / 60:.1f} min")
    if args.json:
        with open(args.json, "w") as f:
            json.dump({v: r.__dict__ for v, r in res.reports.items()}, f, indent=2)


if __name__ == "__main__":
    main()
