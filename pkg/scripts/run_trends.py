"""Run the multi-seed regime comparison and print the seed means."""
import argparse
import logging

from radcon.experiments import run_trend_study


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--frames", type=int, default=2000)
    ap.add_argument("--out", default="trend_results.json")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    study = run_trend_study(args.seeds, args.frames)
    study.dump(args.out)
    for regime, p in [("supervised", 0.05), ("nonjoint_full", 0.05), ("nonjoint_semi", 0.05),
                      ("joint_full", 0.05), ("nonjoint_full", 0.2), ("nonjoint_full", 1.0)]:
        vals = study.values(regime, p)
        print(f"{regime:14s} p={p:<4} mean mAP {100 * study.mean(regime, p):6.2f}  "
              + " ".join(f"{100 * v:6.2f}" for _, v in sorted(vals.items())))


if __name__ == "__main__":
    main()
