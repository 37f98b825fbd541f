"""Overfit sanity run: fit the full model to a handful of clips.

    python scripts/run_overfit.py --clips 50 --max-epochs 500
"""
import argparse
import json
import logging

from binloc.experiments import overfit_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--clips", type=int, default=50)
    ap.add_argument("--max-epochs", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", help="write the result here")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    res = overfit_experiment(n_clips=args.clips, max_epochs=args.max_epochs, seed=args.seed)
    r = res.report
    print(f"epochs {res.epochs}  time {res.seconds:.1f}s  reached={res.reached}")
    print(f"train accuracy {r.detection_accuracy:.4f}  F1 {r.f1:.4f}  "
          f"DAE azi {r.azimuth_dae_deg:.2f} ele {r.elevation_dae_deg:.2f} combined {r.combined_dae_deg:.2f}")
    if args.json:
        with open(args.json, "w") as f:
            json.dump({"epochs": res.epochs, "seconds": res.seconds, "reached": res.reached, **r.__dict__}, f, indent=2)


if __name__ == "__main__":
    main()
