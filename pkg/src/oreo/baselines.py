"""Comparison methods: SFT, rejection sampling and DPO."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Sequence, TextIO

import numpy as np
from scipy.special import expit

from .checkpoint import MetricsRecord
from .errors import ContractError, TrainingError
from .mdp import Key, OfflineDataset, PolicyTable, TaskMdp, Trajectory, ValueTable, log_ratio
from .seeding import derive_rng
from .trainer import (
    Batch,
    TrainConfig,
    TrainedModel,
    batch_log_ratios,
    compile_batch,
    initial_value_table,
    make_optimizer,
    minibatches,
)

DPO_DEFAULTS = {"beta": 0.1, "policy_lr": 0.05}


def dpo_config(**overrides) -> TrainConfig:
    return TrainConfig(**{**DPO_DEFAULTS, **overrides})


@dataclass(frozen=True)
class PreferencePair:
    winner: Trajectory
    loser: Trajectory
    task: Key

    def __post_init__(self):
        if self.winner.task_key != self.loser.task_key:
            raise ContractError("preference pair mixes task instances")
        if not self.winner.total_reward > self.loser.total_reward:
            raise ContractError("winner reward must exceed loser reward")


def sft_loss(traj: Trajectory, pi: PolicyTable) -> float:
    return -float(np.mean([pi.log_prob(s, a) for s, a, _ in traj.steps]))


def bt_probability(reward_w: float, reward_l: float) -> float:
    """Bradley-Terry preference probability ``e^rw / (e^rw + e^rl)``."""
    return float(expit(reward_w - reward_l))


def _margin(pair: PreferencePair, pi: PolicyTable, ref: PolicyTable) -> float:
    w = sum(log_ratio(pi, ref, s, a) for s, a, _ in pair.winner.steps)
    lo = sum(log_ratio(pi, ref, s, a) for s, a, _ in pair.loser.steps)
    return w - lo


def dpo_loss(pair: PreferencePair, pi: PolicyTable, ref: PolicyTable, beta: float) -> float:
    return float(np.logaddexp(0.0, -beta * _margin(pair, pi, ref)))


def make_preference_pairs(dataset: OfflineDataset, max_pairs_per_task: int = 6, seed: int = 0) -> list[PreferencePair]:
    """Per task, sample up to ``max_pairs_per_task`` (positive, negative) pairs without replacement."""
    rng = derive_rng(seed, "pairs")
    pairs: list[PreferencePair] = []
    groups = dataset.by_task()
    for key in sorted(groups):
        pos = [t for t in groups[key] if t.total_reward > 0]
        neg = [t for t in groups[key] if t.total_reward <= 0]
        n = len(pos) * len(neg)
        if n == 0:
            continue
        for c in rng.choice(n, size=min(max_pairs_per_task, n), replace=False):
            pairs.append(PreferencePair(pos[c // len(neg)], neg[c % len(neg)], key))
    return pairs


def write_pairs(fh: TextIO, pairs: Sequence[PreferencePair], dataset: OfflineDataset) -> None:
    """JSONL of ``{task, winner, loser}``; trajectories are referenced by dataset line index."""
    where = {id(t): i for i, t in enumerate(dataset.trajectories)}
    for p in pairs:
        fh.write(json.dumps({"task": list(p.task), "winner": where[id(p.winner)], "loser": where[id(p.loser)]}) + "\n")


def read_pairs(fh: TextIO, dataset: OfflineDataset) -> list[PreferencePair]:
    out = []
    for line in fh:
        if line.strip():
            rec = json.loads(line)
            out.append(PreferencePair(dataset.trajectories[rec["winner"]], dataset.trajectories[rec["loser"]],
                                      tuple(rec["task"])))
    return out


def _token_grad(batch: Batch, logits: np.ndarray, legal: np.ndarray, coef: np.ndarray, logp: np.ndarray) -> np.ndarray:
    """Scatter ``coef[n, t] * d log pi(a_t|s_t) / d logits`` into a logits-shaped array."""
    m = batch.mask
    p = np.where(legal[batch.pol_row], np.exp(logp), 0.0)
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, batch.act[..., None], 1.0, axis=-1)
    g = np.where(m, coef, 0.0)[..., None] * (onehot - p)
    out = np.zeros_like(logits)
    np.add.at(out, batch.pol_row[m], g[m])
    return out


def sft_objective(batch: Batch, logits: np.ndarray, legal: np.ndarray) -> tuple[float, np.ndarray]:
    logp, _ = batch_log_ratios(batch, logits, legal)
    lp = np.take_along_axis(logp, batch.act[..., None], axis=-1)[..., 0]
    N = len(batch)
    T = batch.T[:, None].astype(float)
    loss = float(np.sum(np.where(batch.mask, -lp / T, 0.0)) / N)
    return loss, _token_grad(batch, logits, legal, -1.0 / (T * N) * np.ones_like(lp), logp)


def dpo_objective(win: Batch, lose: Batch, logits: np.ndarray, legal: np.ndarray, beta: float):
    """Mean DPO loss, its logits gradient and the mean summed log-ratio margin."""
    lpw, lrw = batch_log_ratios(win, logits, legal)
    lpl, lrl = batch_log_ratios(lose, logits, legal)
    margin = lrw.sum(axis=1) - lrl.sum(axis=1)
    N = len(win)
    loss = float(np.mean(np.logaddexp(0.0, -beta * margin)))
    d = -expit(-beta * margin) * beta / N  # dL/d(margin) per pair
    grad = _token_grad(win, logits, legal, np.repeat(d[:, None], win.mask.shape[1], axis=1), lpw)
    grad += _token_grad(lose, logits, legal, np.repeat(-d[:, None], lose.mask.shape[1], axis=1), lpl)
    return loss, grad, float(np.mean(margin))


def _mean_kl(policy: PolicyTable, ref: PolicyTable, batch: Batch) -> float:
    logp = policy.all_log_probs()[batch.pol_row]
    p = np.where(policy.legal[batch.pol_row], np.exp(logp), 0.0)
    diff = np.where(policy.legal[batch.pol_row], logp - batch.ref_full, 0.0)
    kl = np.sum(p * diff, axis=-1)
    return float(np.sum(np.where(batch.mask, kl, 0.0)) / batch.mask.sum())


def _residual_zero_value(policy: PolicyTable, batch: Batch, beta: float) -> float:
    _, lr = batch_log_ratios(batch, policy.logits, policy.legal)
    return float(np.max(np.abs(np.where(batch.mask, -batch.reward + beta * lr, 0.0))))


def _fit_policy(policy: PolicyTable, n_items: int, objective: Callable[[np.ndarray], tuple[float, np.ndarray]],
                config: TrainConfig, metrics: Callable[[int, float], MetricsRecord]) -> list[MetricsRecord]:
    opt = make_optimizer(config, policy.logits.shape, config.policy_lr)
    rng = derive_rng(config.seed, "minibatch")
    history = []
    step = 0
    for idx in minibatches(n_items, config, rng):
        loss, grad = objective(idx)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise TrainingError(f"non-finite loss or gradient at step {step}")
        if config.log_every and step % config.log_every == 0:
            history.append(metrics(step, loss))
        policy.logits -= opt.step(grad)
        step += 1
    loss, _ = objective(np.arange(n_items))
    history.append(metrics(step, loss))
    return history


def sft_train(dataset: OfflineDataset, mdp: TaskMdp, ref: PolicyTable, config: TrainConfig,
              init_policy: PolicyTable | None = None) -> TrainedModel:
    """Likelihood training on every trajectory of ``dataset``; the value table stays zero."""
    if not len(dataset):
        raise TrainingError("empty dataset")
    policy = (init_policy or ref).copy()
    batch = compile_batch(dataset.trajectories, policy, ref, None, need_segments=False)

    def objective(idx):
        return sft_objective(batch if len(idx) == len(batch) else batch.subset(idx), policy.logits, policy.legal)

    def metrics(step, loss):
        return MetricsRecord(step, 0.0, loss, _mean_kl(policy, ref, batch),
                             _residual_zero_value(policy, batch, config.beta))

    history = _fit_policy(policy, len(batch), objective, config, metrics)
    return TrainedModel(policy, initial_value_table(mdp, False), history)


def rejection_sampling_train(dataset: OfflineDataset, mdp: TaskMdp, ref: PolicyTable, config: TrainConfig,
                             init_policy: PolicyTable | None = None) -> TrainedModel:
    positives = dataset.positives()
    if not len(positives):
        raise TrainingError("rejection sampling needs at least one reward-1 trajectory")
    return sft_train(positives, mdp, ref, config, init_policy)


def dpo_train(pairs: Sequence[PreferencePair], mdp: TaskMdp, ref: PolicyTable, config: TrainConfig) -> TrainedModel:
    """Gradient descent on the mean DPO loss starting from ``ref``."""
    if not pairs:
        raise TrainingError("DPO needs at least one preference pair")
    policy = ref.copy()
    win = compile_batch([p.winner for p in pairs], policy, ref, None, need_segments=False)
    lose = compile_batch([p.loser for p in pairs], policy, ref, None, need_segments=False)

    def objective(idx):
        full = len(idx) == len(win)
        loss, grad, _ = dpo_objective(win if full else win.subset(idx), lose if full else lose.subset(idx),
                                      policy.logits, policy.legal, config.beta)
        return loss, grad

    def metrics(step, loss):
        return MetricsRecord(step, 0.0, loss, _mean_kl(policy, ref, win),
                             _residual_zero_value(policy, win, config.beta))

    history = _fit_policy(policy, len(pairs), objective, config, metrics)
    return TrainedModel(policy, initial_value_table(mdp, False), history)


def mean_margin(pairs: Sequence[PreferencePair], pi: PolicyTable, ref: PolicyTable) -> float:
    return float(np.mean([_margin(p, pi, ref) for p in pairs]))
