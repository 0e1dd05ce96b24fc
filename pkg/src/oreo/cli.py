"""Command-line entry point.

Subcommands: ``oracle``, ``gen-data``, ``train``, ``eval``, ``iterate`` and
``residual``.  Settings come from a YAML run config (``--config``) and are
overridden by flags; ``--set section.key=value`` reaches any field.  Output
goes under ``--out`` (or ``$ORE0_OUT``, or the config's ``out``)::

    <out>/ckpt/   <out>/data/   <out>/metrics.jsonl   <out>/report.jsonl

Failures print one ``error: <code>`` line followed by the message on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .baselines import dpo_config, dpo_train, make_preference_pairs, read_pairs, rejection_sampling_train, sft_train, write_pairs
from .checkpoint import read_checkpoint, write_checkpoint, write_metrics
from .envs import EnvSpec, generate_offline_dataset, make_env, make_reference
from .errors import ConfigError, OreoError
from .inference import evaluate, parse_mode
from .mdp import OfflineDataset, PolicyTable, reachable_states
from .oracle import bellman_residual, soft_backward_induction
from .seeding import derive_rng
from .trainer import TrainConfig, run_iterations, train

ALGOS = ("oreo", "dpo", "rft", "sft")
EXIT_CODES = {"config_error": 2, "resource_error": 3, "training_error": 4, "numerical_error": 4}


@dataclass
class RunConfig:
    env: EnvSpec | None = None
    algo: str = "oreo"
    train: dict[str, Any] = field(default_factory=dict)
    seed: int = 0
    out: str = "runs/default"
    n_per_task: int = 10
    behavior: str = "ref"
    dataset: str | None = None
    pairs: str | None = None
    pair_cap: int = 6
    checkpoint: str | None = None
    mode: str = "greedy"
    episodes: int = 100
    rounds: int = 3
    threads: int = 1

    def require_env(self) -> EnvSpec:
        if self.env is None:
            raise ConfigError("no env section in the run config (use --config or --set env.family=...)")
        return self.env

    def train_config(self) -> TrainConfig:
        base = dict(self.train)
        base.setdefault("seed", self.seed)
        if self.algo == "dpo":
            return dpo_config(**base)
        return TrainConfig(**base)

    @property
    def out_dir(self) -> Path:
        return Path(self.out)


def _coerce(text: str) -> Any:
    return yaml.safe_load(text)


def load_run_config(args: argparse.Namespace) -> RunConfig:
    raw: dict[str, Any] = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        raw = yaml.safe_load(path.read_text()) or {}
        if not isinstance(raw, dict):
            raise ConfigError("run config must be a mapping")
    env_out = os.environ.get("ORE0_OUT")
    if env_out:
        raw["out"] = env_out
    for item in args.set or []:
        key, eq, val = item.partition("=")
        if not eq:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        node = raw
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _coerce(val)
    flag_map = {
        "seed": "seed", "out": "out", "algo": "algo", "n_per_task": "n_per_task", "behavior": "behavior",
        "dataset": "dataset", "pairs": "pairs", "pair_cap": "pair_cap", "checkpoint": "checkpoint",
        "mode": "mode", "episodes": "episodes", "rounds": "rounds", "threads": "threads",
    }
    for attr, key in flag_map.items():
        val = getattr(args, attr, None)
        if val is not None:
            raw[key] = val
    train_flags = {"variant": "variant", "beta": "beta", "alpha": "alpha", "epochs": "epochs"}
    for attr, key in train_flags.items():
        val = getattr(args, attr, None)
        if val is not None:
            raw.setdefault("train", {})[key] = val
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    env = raw.pop("env", None)
    cfg = RunConfig(**raw)
    if env is not None:
        if not isinstance(env, dict):
            raise ConfigError("env must be a mapping")
        cfg.env = EnvSpec.from_dict(env)
    if cfg.algo not in ALGOS:
        raise ConfigError(f"algo must be one of {ALGOS}")
    if cfg.algo != "oreo" and "variant" in cfg.train and cfg.train["variant"] != "token":
        raise ConfigError(f"variant only applies to oreo, not {cfg.algo}")
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    return cfg


def _setup(cfg: RunConfig):
    spec = cfg.require_env()
    mdp = make_env(spec)
    ref = make_reference(mdp, spec.ref_perturb, spec.seed, cap=spec.state_cap)
    return mdp, ref


def _write_ckpt(path: Path, policy, value, meta, vocab) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        write_checkpoint(fh, policy, value, meta, vocab)


def _load_dataset(path: Path, mdp) -> OfflineDataset:
    if not path.exists():
        raise ConfigError(f"dataset {path} not found")
    with path.open() as fh:
        return OfflineDataset.from_jsonl(fh, mdp)


def _load_ckpt(path: str | None):
    if not path or not Path(path).exists():
        raise ConfigError(f"checkpoint {path} not found")
    with open(path) as fh:
        return read_checkpoint(fh)


def cmd_oracle(cfg: RunConfig) -> int:
    mdp, ref = _setup(cfg)
    beta = cfg.train_config().beta
    res = soft_backward_induction(mdp, ref, beta, cap=cfg.env.state_cap)
    for s0 in mdp.initial_states():
        print(f"V*(s0) {','.join(map(str, s0.tokens))} = {res.v_star[s0]:.10g}")
    resid = bellman_residual(res.pi_star, res.v_star, mdp, ref, beta)
    print(f"max_bellman_residual = {resid:.3g}")
    _write_ckpt(cfg.out_dir / "ckpt" / "oracle.ckpt", res.pi_star, res.v_star,
                {"kind": "oracle", "env": mdp.env_id, "beta": beta}, mdp.vocab_size)
    return 0


def _behavior(cfg: RunConfig, ref: PolicyTable) -> PolicyTable:
    if cfg.behavior == "ref":
        return ref
    policy, _, _ = _load_ckpt(cfg.behavior)
    return policy


def cmd_gen_data(cfg: RunConfig) -> int:
    mdp, ref = _setup(cfg)
    ds = generate_offline_dataset(mdp, _behavior(cfg, ref), cfg.n_per_task, seed=int(derive_rng(cfg.seed, "gen-data").integers(2**31)))
    path = Path(cfg.dataset) if cfg.dataset else cfg.out_dir / "data" / "dataset.jsonl"
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        ds.to_jsonl(fh)
    print(f"count = {ds.count}")
    print(f"positive_fraction = {ds.positive_fraction:.4f}")
    print(f"wrote {path}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    mdp, ref = _setup(cfg)
    tc = cfg.train_config()
    ds = _load_dataset(Path(cfg.dataset) if cfg.dataset else cfg.out_dir / "data" / "dataset.jsonl", mdp)
    if cfg.algo == "oreo":
        model = train(ds, mdp, ref, tc)
    elif cfg.algo == "rft":
        model = rejection_sampling_train(ds, mdp, ref, tc)
    elif cfg.algo == "sft":
        model = sft_train(ds, mdp, ref, tc)
    else:
        if cfg.pairs:
            with open(cfg.pairs) as fh:
                pairs = read_pairs(fh, ds)
        else:
            pairs = make_preference_pairs(ds, cfg.pair_cap, seed=int(derive_rng(cfg.seed, "pairs").integers(2**31)))
            ppath = cfg.out_dir / "data" / "pairs.jsonl"
            ppath.parent.mkdir(parents=True, exist_ok=True)
            with ppath.open("w") as fh:
                write_pairs(fh, pairs, ds)
        model = dpo_train(pairs, mdp, ref, tc)
    ckpt = cfg.out_dir / "ckpt" / f"{cfg.algo}.ckpt"
    _write_ckpt(ckpt, model.policy, model.value, {"kind": cfg.algo, "env": mdp.env_id, "beta": tc.beta,
                                                  "variant": tc.variant}, mdp.vocab_size)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    with (cfg.out_dir / "metrics.jsonl").open("w") as fh:
        write_metrics(fh, model.history)
    last = model.history[-1]
    print(f"value_loss = {last.value_loss:.6g}")
    print(f"policy_loss = {last.policy_loss:.6g}")
    print(f"max_residual = {last.max_residual:.6g}")
    print(f"wrote {ckpt}")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    mdp, _ = _setup(cfg)
    parse_mode(cfg.mode)
    policy, value, _ = _load_ckpt(cfg.checkpoint or str(cfg.out_dir / "ckpt" / f"{cfg.algo}.ckpt"))
    report = evaluate(policy, mdp, cfg.mode, cfg.episodes, seed=cfg.seed, value=value if len(value) else None)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    with (cfg.out_dir / "report.jsonl").open("a") as fh:
        fh.write(report.to_json() + "\n")
    print(report.to_json())
    return 0


def cmd_iterate(cfg: RunConfig) -> int:
    mdp, ref = _setup(cfg)
    tc = cfg.train_config()
    if cfg.algo not in ("oreo", "rft"):
        raise ConfigError("iterate supports algo oreo or rft")
    out = cfg.out_dir
    (out / "data").mkdir(parents=True, exist_ok=True)
    metrics_fh = (out / "metrics.jsonl").open("w")

    def on_round(k, ds, model):
        with (out / "data" / f"round{k}.jsonl").open("w") as fh:
            ds.to_jsonl(fh)
        _write_ckpt(out / "ckpt" / f"round{k}.ckpt", model.policy, model.value,
                    {"kind": cfg.algo, "round": k, "env": mdp.env_id}, mdp.vocab_size)
        write_metrics(metrics_fh, model.history)

    try:
        models = run_iterations(mdp, ref, tc, cfg.rounds, cfg.n_per_task, trainer=cfg.algo, seed=cfg.seed,
                                on_round=on_round)
    finally:
        metrics_fh.close()
    lines = ["round,greedy_success"] + [f"{k},{m.greedy_success:.6f}" for k, m in enumerate(models)]
    (out / "summary.csv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def cmd_residual(cfg: RunConfig) -> int:
    mdp, ref = _setup(cfg)
    policy, value, meta = _load_ckpt(cfg.checkpoint or str(cfg.out_dir / "ckpt" / f"{cfg.algo}.ckpt"))
    beta = float(meta.get("beta", cfg.train_config().beta))
    print(f"max_bellman_residual = {bellman_residual(policy, value, mdp, ref, beta, reachable_states(mdp)):.6g}")
    return 0


COMMANDS = {"oracle": cmd_oracle, "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "iterate": cmd_iterate, "residual": cmd_residual}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config field")
    common.add_argument("--seed", type=int)
    common.add_argument("--out")
    common.add_argument("--threads", type=int)
    common.add_argument("--algo", choices=ALGOS)
    common.add_argument("--variant", choices=("token", "step", "response"))
    common.add_argument("--beta", type=float)
    common.add_argument("--alpha", type=float)
    common.add_argument("--epochs", type=int)
    common.add_argument("--checkpoint")
    common.add_argument("--dataset")

    parser = argparse.ArgumentParser(prog="oreo", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("oracle", parents=[common], help="exact soft values and optimal policy")
    p = sub.add_parser("gen-data", parents=[common], help="sample an offline dataset")
    p.add_argument("--n-per-task", dest="n_per_task", type=int)
    p.add_argument("--behavior", help="'ref' or a checkpoint path")
    p = sub.add_parser("train", parents=[common], help="train oreo or a baseline")
    p.add_argument("--pairs")
    p.add_argument("--pair-cap", dest="pair_cap", type=int)
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--mode", help="greedy | sample | beam:B | bok:K")
    p.add_argument("--episodes", type=int)
    p = sub.add_parser("iterate", parents=[common], help="iterated collect-and-train")
    p.add_argument("--rounds", type=int)
    p.add_argument("--n-per-task", dest="n_per_task", type=int)
    sub.add_parser("residual", parents=[common], help="max soft-Bellman residual of a checkpoint")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args)
        return COMMANDS[args.command](cfg)
    except OreoError as exc:
        print(f"error: {exc.code}", file=sys.stderr)
        print(str(exc), file=sys.stderr)
        return EXIT_CODES.get(exc.code, 1)
    except (OSError, TypeError) as exc:
        print("error: io_error" if isinstance(exc, OSError) else "error: config_error", file=sys.stderr)
        print(str(exc), file=sys.stderr)
        return 1 if isinstance(exc, OSError) else 2


if __name__ == "__main__":
    sys.exit(main())
