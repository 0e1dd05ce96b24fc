"""Token-level against response-level training on sampled keyhole data."""

import argparse

import numpy as np

from oreo.experiments import credit_assignment


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--epochs", type=int, default=1000)
    ap.add_argument("--n-per-task", type=int, default=10)
    ap.add_argument("--alpha", type=float, default=0.01)
    args = ap.parse_args()
    res = credit_assignment(args.seeds, args.epochs, args.n_per_task, alpha=args.alpha)
    print("variant,median_tv,mean_key_prob,per_seed_key_prob")
    for name, r in res.items():
        probs = " ".join(f"{p:.3f}" for p in r.key_prob)
        print(f"{name},{r.median_tv:.3e},{r.mean_key_prob:.4f},{probs}")
    tok, resp = res["token"], res["response"]
    print(f"token wins on key prob for {int(np.sum(np.array(tok.key_prob) > np.array(resp.key_prob)))}/{args.seeds} seeds")


if __name__ == "__main__":
    main()
