"""Pick the joint-training cross-entropy weight by validation mAP on held-out seeds."""
import argparse
import logging

from radcon.config import TrainConfig
from radcon.experiments import corpus_splits
from radcon.trainer import run_regime


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[100, 101, 102])
    ap.add_argument("--alphas", type=float, nargs="+", default=[1.0, 3.0, 10.0])
    ap.add_argument("--fraction", type=float, default=0.05)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    scores = {a: [] for a in args.alphas}
    for seed in args.seeds:
        train, val, test = corpus_splits(seed, 2000, args.fraction)
        for alpha in args.alphas:
            cfg = TrainConfig(regime="joint_full", seed=seed, labeled_fraction=args.fraction, alpha=alpha)
            scores[alpha].append(run_regime(cfg, train, val, test).validation_map)
            print(f"seed {seed} alpha {alpha:g}: validation mAP {100 * scores[alpha][-1]:.2f}", flush=True)
    means = {a: sum(v) / len(v) for a, v in scores.items()}
    for a, m in means.items():
        print(f"alpha {a:g}: mean validation mAP {100 * m:.2f}")
    # within 0.1 points of the best counts as a tie; ties go to the smaller weight
    best = max(means.values())
    print("chosen:", min(a for a, m in means.items() if m >= best - 1e-3))


if __name__ == "__main__":
    main()
