"""Joint policy/value training by soft-Bellman consistency.

Two paths compute the same losses:

* per-trajectory functions (``value_loss``, ``policy_loss_token``, ...) follow
  the formulas term by term on the table objects and are the readable
  reference;
* :class:`Batch` packs many trajectories into padded arrays and
  :func:`oreo_objective` returns batch losses together with analytic
  gradients.  Training uses this path only.

Constancy rules for differentiation: the policy is a constant in the value
loss, and both ``V`` and the future log-ratio sum (stop-gradient) are
constants in the policy loss.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .checkpoint import MetricsRecord
from .errors import ConfigError, ContractError, NumericalError, TrainingError, UnsupportedSupportError
from .mdp import (
    OfflineDataset,
    PolicyTable,
    State,
    TaskMdp,
    Trajectory,
    ValueTable,
    kl_to_reference,
    log_ratio,
    reachable_states,
    suffix_returns,
)
from .seeding import derive_rng

log = logging.getLogger(__name__)

VARIANTS = ("token", "step", "response")


@dataclass
class TrainConfig:
    beta: float = 0.5
    alpha: float = 0.01
    policy_lr: float = 0.1
    value_lr: float = 0.5
    epochs: int = 2000
    batch_size: int | None = None  # None: full batch
    variant: str = "token"
    seed: int = 0
    optimizer: str = "sgd"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    update: str = "simultaneous"
    log_every: int = 100
    fit_afterstates: bool | None = None  # default: only when the env appends observations

    def __post_init__(self):
        if not self.beta > 0:
            raise ConfigError("beta must be positive")
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError("optimizer must be 'sgd' or 'adam'")
        if self.update not in ("simultaneous", "alternating"):
            raise ConfigError("update must be 'simultaneous' or 'alternating'")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        self.adam_betas = tuple(self.adam_betas)


# Settings tuned for LLM logits; kept for reference runs.
LLM_PRESET = {"beta": 0.03, "alpha": 0.01}


@dataclass
class TrainedModel:
    policy: PolicyTable
    value: ValueTable
    history: list[MetricsRecord] = field(default_factory=list)
    greedy_success: float | None = None


# ---------------------------------------------------------------------------
# per-trajectory reference losses


def _log_ratios(traj: Trajectory, pi: PolicyTable, ref: PolicyTable) -> list[float]:
    return [log_ratio(pi, ref, s, a) for s, a, _ in traj.steps]


def _suffix_sums(xs: Sequence[float]) -> list[float]:
    """Backward running sums ``out[t] = xs[t] + out[t+1]``, with a trailing 0."""
    out = [0.0] * (len(xs) + 1)
    for t in range(len(xs) - 1, -1, -1):
        out[t] = xs[t] + out[t + 1]
    return out


def value_residuals(traj: Trajectory, value: ValueTable, pi: PolicyTable, ref: PolicyTable, beta: float) -> np.ndarray:
    """``V(s_t) - R_t + beta * sum_{i>=t} log pi/ref`` for every t."""
    R = suffix_returns(traj)
    S = _suffix_sums(_log_ratios(traj, pi, ref))
    return np.array([value[s] - R[t] + beta * S[t] for t, (s, _, _) in enumerate(traj.steps)])


def consistency_residuals(traj: Trajectory, value: ValueTable, pi: PolicyTable, ref: PolicyTable, beta: float) -> np.ndarray:
    """Single-step soft-Bellman residuals ``V(s_t) - V(s_t+1) - r_t + beta * log pi/ref``."""
    return np.array([
        value[s] - value[traj.next_state(t)] - r + beta * log_ratio(pi, ref, s, a)
        for t, (s, a, r) in enumerate(traj.steps)
    ])


def value_loss(traj: Trajectory, value: ValueTable, pi: PolicyTable, ref: PolicyTable, beta: float) -> float:
    res = value_residuals(traj, value, pi, ref, beta)
    return float(np.mean(res ** 2))


def afterstate_value_loss(traj: Trajectory, value: ValueTable, pi: PolicyTable, ref: PolicyTable, beta: float,
                          mdp: TaskMdp) -> float:
    """Regression of pre-observation rows ``V(s_t || a_t)`` onto ``R_t - beta * sum_{i>t} log pi/ref``."""
    R = suffix_returns(traj)
    S = _suffix_sums(_log_ratios(traj, pi, ref))
    res = [value.lookup(mdp.afterstate_key(s, a)) - R[t] + beta * S[t + 1] for t, (s, a, _) in enumerate(traj.steps)]
    return float(np.mean(np.square(res)))


def reg_loss(traj: Trajectory, pi: PolicyTable, ref: PolicyTable) -> float:
    return float(np.mean([kl_to_reference(pi, ref, s) for s in traj.states]))


def policy_loss_token(traj: Trajectory, value: ValueTable, pi: PolicyTable, ref: PolicyTable, beta: float,
                      alpha: float, future: Sequence[float] | None = None) -> float:
    """Per-token consistency loss plus ``alpha`` times the mean KL to the reference.

    ``future[t]`` replaces the stop-gradient bracket ``beta * sum_{i>t} log pi/ref``
    (used to evaluate the frozen surrogate); by default it is computed from ``pi``.
    """
    R = suffix_returns(traj)
    lrs = _log_ratios(traj, pi, ref)
    S = _suffix_sums(lrs)
    total = 0.0
    for t, (s, _, _) in enumerate(traj.steps):
        fut = beta * S[t + 1] if future is None else future[t]
        total += (value[s] - R[t] + beta * lrs[t] + fut) ** 2
    T = len(traj)
    return total / T + alpha * reg_loss(traj, pi, ref)


def policy_loss_step(traj: Trajectory, value: ValueTable, pi: PolicyTable, ref: PolicyTable, beta: float,
                     alpha: float, future: Sequence[float] | None = None) -> float:
    """Consistency loss over reasoning steps; ``V`` is read at step starts only."""
    segs = traj.step_segments()
    R = suffix_returns(traj)
    lrs = _log_ratios(traj, pi, ref)
    step_lrs = [sum(lrs[a:b]) for a, b in segs]
    S = _suffix_sums(step_lrs)
    total = 0.0
    for k, (a, _) in enumerate(segs):
        fut = beta * S[k + 1] if future is None else future[k]
        total += (value[traj.steps[a].state] - R[a] + beta * step_lrs[k] + fut) ** 2
    return total / len(segs) + alpha * reg_loss(traj, pi, ref)


def step_value_loss(traj: Trajectory, value: ValueTable, pi: PolicyTable, ref: PolicyTable, beta: float) -> float:
    """Value regression restricted to step-start states."""
    res = value_residuals(traj, value, pi, ref, beta)
    starts = [a for a, _ in traj.step_segments()]
    return float(np.mean(res[starts] ** 2))


def response_residual(traj: Trajectory, value: ValueTable, pi: PolicyTable, ref: PolicyTable, beta: float) -> float:
    """Pre-square scalar of the response-level loss; same arithmetic as the t=0 value residual."""
    R = suffix_returns(traj)
    S = _suffix_sums(_log_ratios(traj, pi, ref))
    return float(value[traj.initial_state] - R[0] + beta * S[0])


def policy_loss_response(traj: Trajectory, value: ValueTable, pi: PolicyTable, ref: PolicyTable, beta: float,
                         alpha: float) -> float:
    return response_residual(traj, value, pi, ref, beta) ** 2 + alpha * reg_loss(traj, pi, ref)


POLICY_LOSSES = {"token": policy_loss_token, "step": policy_loss_step, "response": policy_loss_response}


# ---------------------------------------------------------------------------
# vectorized batch


def _log_softmax_rows(logits: np.ndarray, legal: np.ndarray) -> np.ndarray:
    z = np.where(legal, logits, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    sh = z - m
    return sh - np.log(np.exp(sh).sum(axis=-1, keepdims=True))


@dataclass
class Batch:
    """Trajectories packed into ``(N, H)`` arrays indexed against fixed tables."""

    mask: np.ndarray
    pol_row: np.ndarray
    act: np.ndarray
    ref_lp: np.ndarray  # log ref(a_t|s_t)
    ref_full: np.ndarray  # (N, H, vocab) log ref(.|s_t), 0 on illegal and padding
    val_row: np.ndarray
    next_val_row: np.ndarray  # -1 for terminal successors
    after_row: np.ndarray  # -1 when no afterstate row is trained
    reward: np.ndarray
    R: np.ndarray
    T: np.ndarray
    seg_start: np.ndarray  # bool: token opens a reasoning step
    seg_head: np.ndarray  # index of the step start for each token
    K: np.ndarray  # number of steps

    def __len__(self) -> int:
        return len(self.T)

    def subset(self, idx: np.ndarray) -> "Batch":
        return Batch(**{k: getattr(self, k)[idx] for k in self.__dataclass_fields__})


def compile_batch(trajs: Sequence[Trajectory], policy: PolicyTable, ref: PolicyTable, value: ValueTable | None,
                  mdp: TaskMdp | None = None, afterstates: bool = False, need_segments: bool = True) -> Batch:
    if not trajs:
        raise ContractError("empty batch")
    N = len(trajs)
    H = max(len(t) for t in trajs)
    vocab = policy.logits.shape[1]
    z = lambda dt=int: np.zeros((N, H), dtype=dt)  # noqa: E731
    mask, pol_row, act, val_row, after_row = z(bool), z(), z(), z(), z() - 1
    next_val_row = z() - 1
    ref_lp, reward, R = z(float), z(float), z(float)
    ref_full = np.zeros((N, H, vocab))
    seg_start, seg_head = z(bool), z()
    T = np.zeros(N, dtype=int)
    K = np.ones(N, dtype=int)
    ref_all = ref.all_log_probs()
    for n, traj in enumerate(trajs):
        T[n] = len(traj)
        R[n, :T[n]] = suffix_returns(traj)
        for t, (s, a, r) in enumerate(traj.steps):
            mask[n, t] = True
            pol_row[n, t] = policy.row(s)
            act[n, t] = a
            j = ref.row(s)
            ref_full[n, t] = np.where(np.isfinite(ref_all[j]), ref_all[j], 0.0)
            ref_lp[n, t] = ref_all[j, a]
            if not np.isfinite(ref_lp[n, t]):
                raise UnsupportedSupportError(f"reference gives zero probability to {a} at {s.tokens}")
            nxt = traj.next_state(t)
            if value is not None:
                val_row[n, t] = value.row(s)
                if not nxt.terminal:
                    next_val_row[n, t] = value.row(nxt)
            reward[n, t] = r
            if afterstates:
                after_row[n, t] = value.row(mdp.afterstate_key(s, a))
        if need_segments:
            segs = traj.step_segments()
            K[n] = len(segs)
            for a, b in segs:
                seg_start[n, a] = True
                seg_head[n, a:b] = a
        else:
            seg_start[n, :T[n]] = True
            seg_head[n, :T[n]] = np.arange(T[n])
            K[n] = T[n]
    return Batch(mask, pol_row, act, ref_lp, ref_full, val_row, next_val_row, after_row,
                 reward, R, T, seg_start, seg_head, K)


@dataclass
class Objective:
    value_loss: float
    policy_loss: float
    afterstate_loss: float
    mean_kl: float
    max_residual: float
    grad_value: np.ndarray
    grad_logits: np.ndarray


def batch_log_ratios(batch: Batch, logits: np.ndarray, legal: np.ndarray):
    logp = _log_softmax_rows(logits[batch.pol_row], legal[batch.pol_row])
    lp = np.take_along_axis(logp, batch.act[..., None], axis=-1)[..., 0]
    lr = np.where(batch.mask, lp - batch.ref_lp, 0.0)
    return logp, lr


def _suffix(x: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x)
    acc = np.zeros(x.shape[0])
    for t in range(x.shape[1] - 1, -1, -1):
        acc = acc + x[:, t]
        out[:, t] = acc
    return out


def oreo_objective(batch: Batch, logits: np.ndarray, legal: np.ndarray, values: np.ndarray,
                   beta: float, alpha: float, variant: str = "token") -> Objective:
    """Batch-mean value and policy losses with their analytic gradients."""
    N = len(batch)
    m = batch.mask
    T = batch.T[:, None].astype(float)
    K = batch.K[:, None].astype(float)
    logp, lr = batch_log_ratios(batch, logits, legal)
    S = _suffix(lr)
    Vs = np.where(m, values[batch.val_row], 0.0)
    resid = np.where(m, Vs - batch.R + beta * S, 0.0)

    # value loss
    if variant == "step":
        wv = np.where(batch.seg_start, 1.0 / K, 0.0)
    else:
        wv = np.where(m, 1.0 / T, 0.0)
    value_loss = float(np.sum(wv * resid ** 2) / N)
    grad_v = np.zeros_like(values)
    np.add.at(grad_v, batch.val_row[wv > 0], (2.0 * wv * resid / N)[wv > 0])

    after_loss = 0.0
    has_after = batch.after_row >= 0
    if has_after.any():
        wa = np.where(has_after, 1.0 / T, 0.0)
        a_res = np.where(has_after, values[np.maximum(batch.after_row, 0)] - batch.R + beta * (S - lr), 0.0)
        after_loss = float(np.sum(wa * a_res ** 2) / N)
        np.add.at(grad_v, batch.after_row[has_after], (2.0 * wa * a_res / N)[has_after])

    # policy loss: coefficient multiplying d log pi(a_t|s_t) / d logits
    if variant == "token":
        sq = float(np.sum(np.where(m, resid ** 2 / T, 0.0)) / N)
        coef = np.where(m, 2.0 * beta * resid / T, 0.0)
    elif variant == "step":
        head = np.take_along_axis(resid, batch.seg_head, axis=1)
        sq = float(np.sum(np.where(batch.seg_start, resid ** 2 / K, 0.0)) / N)
        coef = np.where(m, 2.0 * beta * head / K, 0.0)
    else:
        sq = float(np.sum(resid[:, 0] ** 2) / N)
        coef = np.where(m, 2.0 * beta * resid[:, :1], 0.0)
    row_legal = legal[batch.pol_row]
    p = np.where(row_legal, np.exp(logp), 0.0)
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, batch.act[..., None], 1.0, axis=-1)
    g = coef[..., None] * (onehot - p)

    diff = np.where(row_legal, logp - batch.ref_full, 0.0)
    kl = np.maximum(np.sum(p * diff, axis=-1), 0.0)
    reg = float(np.sum(np.where(m, kl / T, 0.0)) / N)
    if alpha:
        wk = np.where(m, alpha / T, 0.0)
        g = g + wk[..., None] * p * (diff - np.sum(p * diff, axis=-1, keepdims=True))
    g = g / N
    grad_z = np.zeros_like(logits)
    np.add.at(grad_z, batch.pol_row[m], g[m])

    v_next = np.where(batch.next_val_row >= 0, values[np.maximum(batch.next_val_row, 0)], 0.0)
    bres = np.where(m, Vs - v_next - batch.reward + beta * lr, 0.0)
    mean_kl = float(np.sum(np.where(m, kl, 0.0)) / m.sum())
    return Objective(value_loss, sq + alpha * reg, after_loss, mean_kl, float(np.max(np.abs(bres))),
                     grad_v, grad_z)


# ---------------------------------------------------------------------------
# optimization


class _Adam:
    def __init__(self, shape, lr: float, betas: tuple[float, float], eps: float):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.t = 0

    def step(self, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad ** 2
        mh = self.m / (1 - self.b1 ** self.t)
        vh = self.v / (1 - self.b2 ** self.t)
        return self.lr * mh / (np.sqrt(vh) + self.eps)


class _Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, grad: np.ndarray) -> np.ndarray:
        return self.lr * grad


def make_optimizer(config: TrainConfig, shape, lr: float):
    if config.optimizer == "adam":
        return _Adam(shape, lr, config.adam_betas, config.adam_eps)
    return _Sgd(lr)


def minibatches(n: int, config: TrainConfig, rng: np.random.Generator):
    """Yield index arrays; full batch keeps dataset order, otherwise reshuffle per epoch."""
    if config.batch_size is None or config.batch_size >= n:
        full = np.arange(n)
        for _ in range(config.epochs):
            yield full
        return
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            yield order[start:start + config.batch_size]


def initial_value_table(mdp: TaskMdp, afterstates: bool) -> ValueTable:
    keys = []
    for s in reachable_states(mdp):
        if s.terminal:
            continue
        keys.append(s.tokens)
        if afterstates:
            keys.extend(mdp.afterstate_key(s, a) for a in mdp.legal_actions(s))
    return ValueTable.zeros(keys)


def _check_finite(step: int, obj: Objective, batch: Batch, values: np.ndarray, logits: np.ndarray, value: ValueTable,
                  policy: PolicyTable) -> None:
    for name, x in (("value_loss", obj.value_loss), ("policy_loss", obj.policy_loss)):
        if not np.isfinite(x):
            raise TrainingError(f"non-finite {name} at step {step}")
    for name, arr, keys in (("value", values, value.keys), ("logits", logits, policy.keys)):
        bad = ~np.isfinite(arr)
        if bad.any():
            row = int(np.argwhere(bad)[0][0])
            raise NumericalError(f"non-finite {name} entry at step {step}, state {keys[row]}")


def train(dataset: OfflineDataset, mdp: TaskMdp, ref: PolicyTable, config: TrainConfig,
          init_policy: PolicyTable | None = None, init_value: ValueTable | None = None,
          evaluate_fn: Callable[[PolicyTable, ValueTable], float] | None = None,
          eval_every: int | None = None) -> TrainedModel:
    """Joint minimization of the value and policy losses over ``dataset``.

    The policy starts as a copy of ``ref`` and the value table at zero unless
    warm-start tables are given.  Every step updates both tables from
    gradients taken at the same parameters (or value first when
    ``config.update == "alternating"``).
    """
    if not len(dataset):
        raise TrainingError("empty dataset")
    afterstates = mdp.has_observations if config.fit_afterstates is None else config.fit_afterstates
    policy = (init_policy or ref).copy()
    value = init_value.copy() if init_value is not None else initial_value_table(mdp, afterstates)
    batch = compile_batch(dataset.trajectories, policy, ref, value, mdp, afterstates,
                          need_segments=config.variant == "step")
    logits, values = policy.logits, value.values
    opt_p = make_optimizer(config, logits.shape, config.policy_lr)
    opt_v = make_optimizer(config, values.shape, config.value_lr)
    rng = derive_rng(config.seed, "minibatch")
    history: list[MetricsRecord] = []

    def record(step: int, obj: Objective) -> None:
        succ = None
        if evaluate_fn is not None and eval_every and step % eval_every == 0:
            succ = evaluate_fn(policy, value)
        history.append(MetricsRecord(step, obj.value_loss + obj.afterstate_loss, obj.policy_loss,
                                     obj.mean_kl, obj.max_residual, succ))

    step = 0
    for idx in minibatches(len(batch), config, rng):
        sub = batch if len(idx) == len(batch) else batch.subset(idx)
        obj = oreo_objective(sub, logits, policy.legal, values, config.beta, config.alpha, config.variant)
        _check_finite(step, obj, sub, values, logits, value, policy)
        if config.log_every and step % config.log_every == 0:
            record(step, obj)
        values -= opt_v.step(obj.grad_value)
        if config.update == "alternating":
            obj = oreo_objective(sub, logits, policy.legal, values, config.beta, config.alpha, config.variant)
        logits -= opt_p.step(obj.grad_logits)
        step += 1
    final = oreo_objective(batch, logits, policy.legal, values, config.beta, config.alpha, config.variant)
    _check_finite(step, final, batch, values, logits, value, policy)
    record(step, final)
    log.debug("trained %d steps: value_loss=%.3g policy_loss=%.3g", step, final.value_loss, final.policy_loss)
    return TrainedModel(policy, value, history)


TrainerFn = Callable[..., TrainedModel]


def run_iterations(mdp: TaskMdp, ref: PolicyTable, config: TrainConfig, rounds: int, n_per_task: int = 10,
                   trainer: str = "oreo", seed: int | None = None,
                   on_round: Callable[[int, OfflineDataset, TrainedModel], None] | None = None) -> list[TrainedModel]:
    """Iterated collect-and-train.

    Round 0 samples with ``ref``; round ``k`` samples with the round ``k-1``
    policy and continues training from its tables.  The KL anchor stays
    ``ref`` throughout.  ``trainer`` is ``"oreo"`` or ``"rft"`` (rejection
    sampling).
    """
    from .baselines import rejection_sampling_train
    from .envs import generate_offline_dataset
    from .inference import evaluate

    if rounds < 1:
        raise ConfigError("rounds must be >= 1")
    seed = config.seed if seed is None else seed
    models: list[TrainedModel] = []
    behavior, prev = ref, None
    for k in range(rounds):
        ds = generate_offline_dataset(mdp, behavior, n_per_task, seed=int(derive_rng(seed, "round", k).integers(2**31)))
        cfg = replace(config, seed=int(derive_rng(seed, "train", k).integers(2**31)))
        if trainer == "oreo":
            model = train(ds, mdp, ref, cfg, init_policy=prev.policy if prev else None,
                          init_value=prev.value if prev else None)
        elif trainer == "rft":
            if not any(t.total_reward > 0 for t in ds):
                model = prev if prev is not None else TrainedModel(ref.copy(), initial_value_table(mdp, False))
                model = TrainedModel(model.policy.copy(), model.value.copy(), [])
            else:
                model = rejection_sampling_train(ds, mdp, ref, cfg, init_policy=prev.policy if prev else None)
        else:
            raise ConfigError(f"unknown trainer {trainer!r}")
        n_inst = len(mdp.initial_states())
        model.greedy_success = evaluate(model.policy, mdp, "greedy", n_inst, seed=0).success_rate
        models.append(model)
        if on_round is not None:
            on_round(k, ds, model)
        behavior, prev = model.policy, model
    return models
