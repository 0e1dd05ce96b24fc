"""Token-level training on full-coverage data, compared with the exact oracle."""

import argparse

from oreo.experiments import CONVERGENCE_ENVS, convergence_run


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--env", choices=sorted(CONVERGENCE_ENVS), action="append")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--steps", type=int, default=5000)
    ap.add_argument("--alpha", type=float, default=0.0)
    ap.add_argument("--beta", type=float, default=0.5)
    args = ap.parse_args()
    print("env,seed,alpha,steps,max_residual,max_tv")
    for env in args.env or sorted(CONVERGENCE_ENVS):
        for seed in range(args.seeds):
            r = convergence_run(env, seed, alpha=args.alpha, steps=args.steps, beta=args.beta)
            print(f"{r.env},{r.seed},{r.alpha},{r.steps},{r.residual:.3e},{r.max_tv:.3e}", flush=True)


if __name__ == "__main__":
    main()
