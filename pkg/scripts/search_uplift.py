"""Value-guided beam search on digit-chain and best-of-K on a walled gridworld."""

import argparse

from oreo.experiments import beam_uplift, best_of_k_uplift


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--width", type=int, default=4)
    ap.add_argument("--k", type=int, default=5)
    ap.add_argument("--epochs", type=int, default=300)
    ap.add_argument("--episodes", type=int, default=500)
    args = ap.parse_args()
    print("study,seed,baseline,searched")
    for seed in range(args.seeds):
        r = beam_uplift(seed, width=args.width, epochs=args.epochs)
        print(f"beam:{args.width},{seed},{r.baseline:.3f},{r.searched:.3f}", flush=True)
    for seed in range(args.seeds):
        r = best_of_k_uplift(seed, k=args.k, episodes=args.episodes, epochs=args.epochs)
        print(f"bok:{args.k},{seed},{r.baseline:.3f},{r.searched:.3f}", flush=True)


if __name__ == "__main__":
    main()
