"""Token-level MDP abstraction, tabular policies/values and shared quantities.

A state is the full token sequence seen so far (prompt, generated tokens and
any observation tokens the environment appended).  Transitions are
deterministic; rewards are sparse and sit on the action entering a terminal
state.  Tables are keyed by the exact token tuple of a state.
"""

from __future__ import annotations

import json
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, NamedTuple, Sequence, TextIO

import numpy as np

from .errors import ContractError, DomainError, ResourceError, UnsupportedSupportError

Key = tuple[int, ...]

DEFAULT_STATE_CAP = 200_000


@dataclass(frozen=True)
class State:
    """Immutable token sequence with step-boundary markers.

    Equality and hashing use the token sequence only.
    """

    tokens: Key
    boundaries: tuple[int, ...] = field(default=(), compare=False)
    terminal: bool = field(default=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        object.__setattr__(self, "boundaries", tuple(int(b) for b in self.boundaries))
        prev = -1
        for b in self.boundaries:
            if b <= prev or b > len(self.tokens):
                raise ContractError(f"bad boundary indices {self.boundaries} for length {len(self.tokens)}")
            prev = b

    @property
    def key(self) -> Key:
        return self.tokens

    def __len__(self) -> int:
        return len(self.tokens)


class Step(NamedTuple):
    state: State
    action: int
    reward: float


@dataclass(frozen=True)
class Trajectory:
    steps: tuple[Step, ...]
    final_state: State
    env_id: str = ""

    @property
    def states(self) -> list[State]:
        return [st.state for st in self.steps]

    @property
    def actions(self) -> list[int]:
        return [st.action for st in self.steps]

    @property
    def rewards(self) -> np.ndarray:
        return np.array([st.reward for st in self.steps], dtype=float)

    @property
    def total_reward(self) -> float:
        return float(sum(st.reward for st in self.steps))

    @property
    def initial_state(self) -> State:
        return self.steps[0].state if self.steps else self.final_state

    @property
    def task_key(self) -> Key:
        return self.initial_state.tokens

    def next_state(self, t: int) -> State:
        return self.steps[t + 1].state if t + 1 < len(self.steps) else self.final_state

    def __len__(self) -> int:
        return len(self.steps)

    def step_segments(self) -> list[tuple[int, int]]:
        """Half-open action-index ranges, one per reasoning step.

        A step ends at the action after which the boundary list grows.
        """
        segments = []
        start = 0
        for t, st in enumerate(self.steps):
            nxt = self.next_state(t)
            if len(nxt.boundaries) > len(st.state.boundaries):
                segments.append((start, t + 1))
                start = t + 1
        if start != len(self.steps):
            raise ContractError("trajectory ends inside an unterminated step (missing boundary)")
        return segments


class TaskMdp(ABC):
    """Deterministic token MDP with sparse terminal reward."""

    env_id: str = "mdp"
    vocab_size: int
    horizon: int
    has_observations: bool = False

    @abstractmethod
    def initial_states(self) -> list[State]:
        ...

    @abstractmethod
    def legal_actions(self, s: State) -> tuple[int, ...]:
        ...

    @abstractmethod
    def _advance(self, s: State, a: int) -> State:
        """Successor of ``s`` under ``a``; inputs are already validated."""

    @abstractmethod
    def _reward(self, s: State, a: int) -> float:
        ...

    def _check(self, s: State, a: int) -> None:
        if s.terminal:
            raise ContractError(f"no actions from terminal state {s.tokens}")
        if a not in self.legal_actions(s):
            raise DomainError(f"token {a} is not legal in state {s.tokens}")

    def transition(self, s: State, a: int) -> State:
        self._check(s, a)
        return self._advance(s, a)

    def reward(self, s: State, a: int) -> float:
        self._check(s, a)
        return self._reward(s, a)

    def afterstate_key(self, s: State, a: int) -> Key:
        """Tokens of ``s`` with the action appended, before any observation."""
        return s.tokens + (int(a),)


def transition(mdp: TaskMdp, s: State, a: int) -> State:
    return mdp.transition(s, a)


def reachable_states(mdp: TaskMdp, cap: int = DEFAULT_STATE_CAP, roots: Iterable[State] | None = None) -> list[State]:
    """All states reachable from the initial states, in depth-first preorder."""
    out: list[State] = []
    seen: set[Key] = set()
    stack = list(reversed(list(roots if roots is not None else mdp.initial_states())))
    while stack:
        s = stack.pop()
        if s.tokens in seen:
            continue
        seen.add(s.tokens)
        out.append(s)
        if len(out) > cap:
            raise ResourceError(f"reachable state set exceeds cap of {cap}")
        if not s.terminal:
            children = [mdp.transition(s, a) for a in mdp.legal_actions(s)]
            stack.extend(reversed(children))
    return out


def suffix_returns(traj: Trajectory) -> np.ndarray:
    r = traj.rewards
    return np.cumsum(r[::-1])[::-1].copy() if len(r) else r


def _stable_log_softmax(logits: np.ndarray, legal: np.ndarray) -> np.ndarray:
    z = np.where(legal, logits, -np.inf)
    m = np.max(z, axis=-1, keepdims=True)
    shifted = z - m
    lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    return shifted - lse


class PolicyTable:
    """Per-state logits over the vocabulary; illegal tokens are masked.

    ``logits`` has one row per stored state and one column per token id.
    Probabilities always come from a max-subtracted softmax over the legal
    columns.
    """

    def __init__(self, keys: Sequence[Key], logits: np.ndarray, legal: np.ndarray):
        self.keys = [tuple(k) for k in keys]
        self.index = {k: i for i, k in enumerate(self.keys)}
        if len(self.index) != len(self.keys):
            raise ContractError("duplicate state keys in policy table")
        self.logits = np.array(logits, dtype=float)
        self.legal = np.array(legal, dtype=bool)
        if self.logits.shape != self.legal.shape or self.logits.shape[0] != len(self.keys):
            raise ContractError("logits/legal shape mismatch")
        if len(self.keys) and not self.legal.any(axis=1).all():
            raise ContractError("every stored state needs at least one legal action")

    @classmethod
    def from_mdp(
        cls,
        mdp: TaskMdp,
        states: Iterable[State] | None = None,
        logits_fn: Callable[[State, tuple[int, ...]], np.ndarray] | None = None,
    ) -> "PolicyTable":
        """Table over the non-terminal states (default: all reachable)."""
        if states is None:
            states = reachable_states(mdp)
        keys, rows, masks = [], [], []
        for s in states:
            if s.terminal:
                continue
            acts = mdp.legal_actions(s)
            mask = np.zeros(mdp.vocab_size, dtype=bool)
            mask[list(acts)] = True
            row = np.zeros(mdp.vocab_size)
            if logits_fn is not None:
                row[list(acts)] = logits_fn(s, acts)
            keys.append(s.tokens)
            rows.append(row)
            masks.append(mask)
        vocab = mdp.vocab_size
        return cls(keys, np.array(rows).reshape(-1, vocab), np.array(masks).reshape(-1, vocab))

    def __len__(self) -> int:
        return len(self.keys)

    def __contains__(self, s) -> bool:
        return _key(s) in self.index

    def row(self, s) -> int:
        try:
            return self.index[_key(s)]
        except KeyError:
            raise ContractError(f"state {_key(s)} not in policy table") from None

    def copy(self) -> "PolicyTable":
        return PolicyTable(self.keys, self.logits.copy(), self.legal.copy())

    def legal_actions(self, s) -> tuple[int, ...]:
        return tuple(int(a) for a in np.flatnonzero(self.legal[self.row(s)]))

    def log_probs(self, s) -> np.ndarray:
        i = self.row(s)
        return _stable_log_softmax(self.logits[i], self.legal[i])

    def probs(self, s) -> np.ndarray:
        return np.exp(self.log_probs(s))

    def log_prob(self, s, a: int) -> float:
        return float(self.log_probs(s)[a])

    def prob(self, s, a: int) -> float:
        return float(self.probs(s)[a])

    def all_log_probs(self) -> np.ndarray:
        if not len(self.keys):
            return self.logits.copy()
        return _stable_log_softmax(self.logits, self.legal)

    def all_probs(self) -> np.ndarray:
        return np.exp(self.all_log_probs())


class ValueTable:
    """Scalar per state; terminal states are 0 by convention and never stored."""

    def __init__(self, keys: Sequence[Key], values: Sequence[float]):
        self.keys = [tuple(k) for k in keys]
        self.index = {k: i for i, k in enumerate(self.keys)}
        self.values = np.array(values, dtype=float).reshape(len(self.keys))

    @classmethod
    def zeros(cls, keys: Iterable[Key]) -> "ValueTable":
        keys = list(keys)
        return cls(keys, np.zeros(len(keys)))

    def __len__(self) -> int:
        return len(self.keys)

    def __contains__(self, s) -> bool:
        return _key(s) in self.index

    def row(self, s) -> int:
        try:
            return self.index[_key(s)]
        except KeyError:
            raise ContractError(f"state {_key(s)} not in value table") from None

    def __getitem__(self, s) -> float:
        if isinstance(s, State) and s.terminal:
            return 0.0
        return float(self.values[self.row(s)])

    def lookup(self, tokens: Key) -> float:
        return float(self.values[self.row(tokens)])

    def copy(self) -> "ValueTable":
        return ValueTable(self.keys, self.values.copy())


def _key(s) -> Key:
    return s.tokens if isinstance(s, State) else tuple(s)


def log_ratio(pi: PolicyTable, ref: PolicyTable, s, a: int) -> float:
    lr = ref.log_prob(s, a)
    if not np.isfinite(lr):
        raise UnsupportedSupportError(f"reference assigns zero probability to {a} in {_key(s)}")
    lp = pi.log_prob(s, a)
    if not np.isfinite(lp):
        raise DomainError(f"policy assigns zero probability to {a} in {_key(s)}")
    return lp - lr


def kl_to_reference(pi: PolicyTable, ref: PolicyTable, s) -> float:
    i, j = pi.row(s), ref.row(s)
    if not np.array_equal(pi.legal[i], ref.legal[j]):
        raise ContractError(f"legal action sets differ at {_key(s)}")
    mask = pi.legal[i]
    lp = pi.log_probs(s)[mask]
    lq = ref.log_probs(s)[mask]
    return max(float(np.sum(np.exp(lp) * (lp - lq))), 0.0)


def step_log_prob(pi: PolicyTable, mdp: TaskMdp, s: State, step_tokens: Sequence[int]) -> float:
    total = 0.0
    for tok in step_tokens:
        if s.terminal or tok not in mdp.legal_actions(s):
            raise DomainError(f"token {tok} is not legal mid-step at {s.tokens}")
        total += pi.log_prob(s, tok)
        s = mdp._advance(s, tok)
    return total


def rollout(mdp: TaskMdp, s0: State, choose: Callable[[State], int]) -> Trajectory:
    """Run ``choose`` from ``s0`` until a terminal state."""
    steps = []
    s = s0
    while not s.terminal:
        a = int(choose(s))
        r = mdp.reward(s, a)
        steps.append(Step(s, a, r))
        s = mdp.transition(s, a)
        if len(steps) > mdp.horizon:
            raise ContractError(f"rollout exceeded horizon {mdp.horizon}")
    return Trajectory(tuple(steps), s, mdp.env_id)


def sample_action(pi: PolicyTable, s, rng: np.random.Generator) -> int:
    p = pi.probs(s)
    acts = np.flatnonzero(p > 0)
    p = p[acts]
    return int(acts[rng.choice(len(acts), p=p / p.sum())])


def replay(mdp: TaskMdp, s0: State, actions: Iterable[int]) -> Trajectory:
    it = iter(actions)
    return rollout(mdp, s0, lambda _s: next(it))


def validate_trajectory(mdp: TaskMdp, traj: Trajectory) -> None:
    """Raise ``ContractError`` unless ``traj`` is a faithful MDP rollout."""
    if not traj.steps:
        raise ContractError("empty trajectory")
    for t, (s, a, r) in enumerate(traj.steps):
        nxt = mdp.transition(s, a)
        if nxt != traj.next_state(t) or nxt.terminal != traj.next_state(t).terminal:
            raise ContractError(f"step {t}: successor does not match transition")
        if r != mdp.reward(s, a):
            raise ContractError(f"step {t}: stored reward {r} differs from MDP reward")
        if r != 0.0 and t != len(traj.steps) - 1:
            raise ContractError(f"step {t}: non-terminal reward")
    if not traj.final_state.terminal:
        raise ContractError("final state is not terminal")


@dataclass
class OfflineDataset:
    """Reward-labelled trajectories grouped by task instance."""

    trajectories: list[Trajectory]
    env_id: str = ""

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self) -> Iterator[Trajectory]:
        return iter(self.trajectories)

    @property
    def count(self) -> int:
        return len(self.trajectories)

    @property
    def positive_fraction(self) -> float:
        if not self.trajectories:
            return 0.0
        return sum(t.total_reward > 0 for t in self.trajectories) / len(self.trajectories)

    def by_task(self) -> dict[Key, list[Trajectory]]:
        groups: dict[Key, list[Trajectory]] = {}
        for t in self.trajectories:
            groups.setdefault(t.task_key, []).append(t)
        return groups

    def positives(self) -> "OfflineDataset":
        return OfflineDataset([t for t in self.trajectories if t.total_reward > 0], self.env_id)

    def validate(self, mdp: TaskMdp) -> None:
        for t in self.trajectories:
            validate_trajectory(mdp, t)

    def to_jsonl(self, fh: TextIO) -> None:
        for t in self.trajectories:
            fh.write(json.dumps(trajectory_to_record(t)) + "\n")

    @classmethod
    def from_jsonl(cls, fh: TextIO, mdp: TaskMdp) -> "OfflineDataset":
        trajs = [record_to_trajectory(json.loads(line), mdp) for line in fh if line.strip()]
        return cls(trajs, mdp.env_id)


def trajectory_to_record(traj: Trajectory) -> dict:
    steps = []
    for start, end in traj.step_segments():
        action, obs = [], []
        for t in range(start, end):
            s, a, _ = traj.steps[t]
            action.append(a)
            obs.extend(traj.next_state(t).tokens[len(s.tokens) + 1:])
        steps.append({"action": action, "obs": obs})
    return {
        "env_id": traj.env_id,
        "prompt": list(traj.initial_state.tokens),
        "steps": steps,
        "reward": traj.total_reward,
    }


def record_to_trajectory(rec: dict, mdp: TaskMdp) -> Trajectory:
    prompt = tuple(rec["prompt"])
    starts = {s.tokens: s for s in mdp.initial_states()}
    if prompt not in starts:
        raise ContractError(f"prompt {prompt} is not an initial state of {mdp.env_id}")
    actions = [a for step in rec["steps"] for a in step["action"]]
    traj = replay(mdp, starts[prompt], actions)
    traj = Trajectory(traj.steps, traj.final_state, rec.get("env_id", mdp.env_id))
    if trajectory_to_record(traj)["steps"] != [
        {"action": list(st["action"]), "obs": list(st["obs"])} for st in rec["steps"]
    ]:
        raise ContractError("recorded observations/segmentation disagree with the environment")
    if traj.total_reward != float(rec["reward"]):
        raise ContractError("recorded reward disagrees with the environment")
    return traj
