"""Decoding and test-time search guided by a value table.

Tie-breaking is always "lowest index wins" so every search is reproducible
for a fixed seed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, ContractError
from .mdp import PolicyTable, State, Step, TaskMdp, Trajectory, ValueTable, log_ratio, rollout, sample_action
from .seeding import derive_rng

STEP_ENUM_CAP = 256


def greedy_decode(pi: PolicyTable, mdp: TaskMdp, s0: State) -> Trajectory:
    # np.argmax returns the first maximum, i.e. the lowest token id
    return rollout(mdp, s0, lambda s: int(np.argmax(pi.probs(s))))


@dataclass(frozen=True)
class BeamCandidate:
    steps: tuple[Step, ...]
    state: State
    reward: float
    score: float

    @property
    def finished(self) -> bool:
        return self.state.terminal

    def trajectory(self, env_id: str) -> Trajectory:
        return Trajectory(self.steps, self.state, env_id)


def _closes_step(before: State, after: State) -> bool:
    return after.terminal or len(after.boundaries) > len(before.boundaries)


def enumerate_steps(pi: PolicyTable, mdp: TaskMdp, s: State, cap: int = STEP_ENUM_CAP):
    """All complete reasoning steps from ``s`` with their log-probabilities.

    Returns ``None`` when there are more than ``cap`` of them.
    """
    out = []
    stack = [(s, (), 0.0)]
    while stack:
        cur, steps, lp = stack.pop()
        for a in reversed(mdp.legal_actions(cur)):
            nxt = mdp.transition(cur, a)
            item = (nxt, steps + (Step(cur, a, mdp.reward(cur, a)),), lp + pi.log_prob(cur, a))
            if _closes_step(cur, nxt):
                out.append(item)
                if len(out) > cap:
                    return None
            else:
                stack.append(item)
    return out


def _sample_step(pi: PolicyTable, mdp: TaskMdp, s: State, rng: np.random.Generator):
    steps = []
    cur = s
    while True:
        a = sample_action(pi, cur, rng)
        nxt = mdp.transition(cur, a)
        steps.append(Step(cur, a, mdp.reward(cur, a)))
        if _closes_step(cur, nxt):
            return nxt, tuple(steps)
        cur = nxt


def propose_steps(pi: PolicyTable, mdp: TaskMdp, s: State, n: int, rng: np.random.Generator):
    """Up to ``n`` distinct next steps sampled from ``pi``.

    Small step spaces are sampled without replacement; large ones with
    replacement followed by de-duplication.
    """
    options = enumerate_steps(pi, mdp, s)
    if options is not None:
        p = np.exp(np.array([lp for _, _, lp in options]))
        k = min(n, int(np.count_nonzero(p)))
        picks = rng.choice(len(options), size=k, replace=False, p=p / p.sum())
        return [(options[i][0], options[i][1]) for i in picks]
    seen, out = set(), []
    for _ in range(n):
        nxt, steps = _sample_step(pi, mdp, s, rng)
        if nxt.tokens not in seen:
            seen.add(nxt.tokens)
            out.append((nxt, steps))
    return out


def _score(value: ValueTable, steps: tuple[Step, ...], state: State, reward: float) -> float:
    if state.terminal:
        # finished: value of the terminal-preceding state plus collected reward
        return value[steps[-1].state] + reward if steps else reward
    return value[state]


def beam_search(pi: PolicyTable, value: ValueTable, mdp: TaskMdp, s0: State, B: int,
                rng: np.random.Generator | None = None) -> Trajectory:
    """Step-level beam search keeping the ``B`` highest-value candidates."""
    if B < 1:
        raise ConfigError("beam width must be >= 1")
    if rng is None:
        rng = np.random.default_rng(0)
    beam = [BeamCandidate((), s0, 0.0, _score(value, (), s0, 0.0))]
    while not all(c.finished for c in beam):
        pool: list[BeamCandidate] = []
        for cand in beam:
            if cand.finished:
                pool.append(cand)
                continue
            for nxt, steps in propose_steps(pi, mdp, cand.state, B, rng):
                all_steps = cand.steps + steps
                reward = cand.reward + sum(st.reward for st in steps)
                pool.append(BeamCandidate(all_steps, nxt, reward, _score(value, all_steps, nxt, reward)))
        order = sorted(range(len(pool)), key=lambda i: -pool[i].score)  # stable: index order on ties
        beam = [pool[i] for i in order[:B]]
    best = min(range(len(beam)), key=lambda i: (-beam[i].score, -beam[i].reward, i))
    return beam[best].trajectory(mdp.env_id)


def afterstate_value(value: ValueTable, mdp: TaskMdp, s: State, a: int) -> float:
    """Value of ``s`` with ``a`` appended, before the environment responds."""
    if mdp.has_observations:
        return value.lookup(mdp.afterstate_key(s, a))
    # no observations: the afterstate is the successor itself
    return mdp.reward(s, a) + value[mdp.transition(s, a)]


def best_of_k(pi: PolicyTable, value: ValueTable, mdp: TaskMdp, s: State, K: int,
              rng: np.random.Generator) -> int:
    if K < 1:
        raise ConfigError("K must be >= 1")
    samples = [sample_action(pi, s, rng) for _ in range(K)]
    if K == 1:
        return samples[0]
    scores = [afterstate_value(value, mdp, s, a) for a in samples]
    return samples[int(np.argmax(scores))]


def advantage_explicit(value: ValueTable, s_i: State, s_j: State) -> float:
    return value[s_j] - value[s_i]


def advantage_implicit(pi: PolicyTable, ref: PolicyTable, segment: Sequence[tuple[State, int]], beta: float) -> float:
    return float(sum(beta * log_ratio(pi, ref, s, a) for s, a in segment))


@dataclass(frozen=True)
class AdvantageReport:
    start: int
    end: int
    a_explicit: float
    a_implicit: float

    def __post_init__(self):
        if not self.start < self.end:
            raise ContractError("segment must satisfy start < end")


def advantage_report(traj: Trajectory, i: int, j: int, value: ValueTable, pi: PolicyTable, ref: PolicyTable,
                     beta: float) -> AdvantageReport:
    """Both advantages for the segment from state ``i`` to state ``j`` of ``traj``."""
    s_i = traj.steps[i].state
    s_j = traj.next_state(j - 1)
    segment = [(st.state, st.action) for st in traj.steps[i:j]]
    return AdvantageReport(i, j, advantage_explicit(value, s_i, s_j), advantage_implicit(pi, ref, segment, beta))


@dataclass
class EvalReport:
    mode: str
    B_or_K: int | None
    episodes: int
    success_rate: float
    mean_reward: float
    mean_length: float
    seed: int

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def parse_mode(mode: str) -> tuple[str, int | None]:
    name, _, arg = mode.partition(":")
    if name in ("greedy", "sample") and not arg:
        return name, None
    if name in ("beam", "bok"):
        try:
            n = int(arg) if arg else (4 if name == "beam" else 5)
        except ValueError:
            raise ConfigError(f"bad mode {mode!r}") from None
        if n < 1:
            raise ConfigError(f"{name} width must be >= 1")
        return name, n
    raise ConfigError(f"unknown evaluation mode {mode!r}")


def evaluate(pi: PolicyTable, mdp: TaskMdp, mode: str, episodes: int, seed: int = 0,
             value: ValueTable | None = None) -> EvalReport:
    """Success rate, mean reward and mean length over ``episodes`` episodes.

    Episodes cycle through the task instances in order.  ``mode`` is
    ``greedy``, ``sample``, ``beam:B`` or ``bok:K``.
    """
    if episodes < 1:
        raise ConfigError("episodes must be >= 1")
    name, n = parse_mode(mode)
    if name == "beam" and mdp.has_observations:
        raise ConfigError("beam search needs known dynamics; use bok:K for agent environments")
    if name in ("beam", "bok") and value is None and not (name == "bok" and n == 1):
        raise ConfigError(f"mode {mode} needs a value table")
    rng = derive_rng(seed, "evaluate")
    starts = mdp.initial_states()
    rewards, lengths = [], []
    for e in range(episodes):
        s0 = starts[e % len(starts)]
        if name == "greedy":
            traj = greedy_decode(pi, mdp, s0)
        elif name == "sample":
            traj = rollout(mdp, s0, lambda s: sample_action(pi, s, rng))
        elif name == "beam":
            traj = beam_search(pi, value, mdp, s0, n, rng)
        else:
            traj = rollout(mdp, s0, lambda s: best_of_k(pi, value, mdp, s, n, rng))
        rewards.append(traj.total_reward)
        lengths.append(len(traj))
    rewards = np.array(rewards)
    return EvalReport(name, n, episodes, float(np.mean(rewards >= 1.0)), float(np.mean(rewards)),
                      float(np.mean(lengths)), seed)
