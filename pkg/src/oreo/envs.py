"""Synthetic task families and offline dataset generation.

* ``digit-chain``: the prompt holds two integers ``(a, b)`` mod V; step ``k``
  must end with the running sum ``(a + k*b) mod V``.  Reward 1 only if every
  step ends correctly, so the final token carries the total.
* ``keyhole``: reward 1 iff the token at one fixed position equals the key.
  Every other position is free, which isolates credit assignment.
* ``gridworld``: movement tokens; after each move the environment appends an
  observation token for the new cell.  Reward 1 on entering the goal.

``TreeMdp`` is an explicit finite tree used for randomized oracle checks.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, fields
from typing import Any

import numpy as np

from .errors import ConfigError, ResourceError
from .mdp import (
    DEFAULT_STATE_CAP,
    Key,
    OfflineDataset,
    PolicyTable,
    State,
    Step,
    TaskMdp,
    Trajectory,
    reachable_states,
    rollout,
    sample_action,
)
from .seeding import derive_rng

FAMILIES = ("digit-chain", "keyhole", "gridworld")


@dataclass
class EnvSpec:
    family: str = "keyhole"
    vocab: int = 2
    depth: int = 3
    step_len: int = 1
    # keyhole
    key_pos: int = 0
    key_token: int = 1
    # gridworld
    width: int = 3
    height: int = 1
    goal: int = 2
    starts: list[int] = field(default_factory=lambda: [0])
    walls: list[int] = field(default_factory=list)
    horizon: int = 4
    # task instances: digit-chain draws this many (a, b) pairs, keyhole shifts the key
    instances: int = 1
    seed: int = 0
    # reference policy: logits ~ ref_perturb * N(0, 1)
    ref_perturb: float = 0.0
    state_cap: int = DEFAULT_STATE_CAP

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "EnvSpec":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown env keys: {sorted(unknown)}")
        return cls(**d)


class DigitChain(TaskMdp):
    def __init__(self, vocab: int, depth: int, pairs: list[tuple[int, int]], step_len: int = 1):
        if vocab < 2 or depth < 1 or step_len < 1 or not pairs:
            raise ConfigError(f"invalid digit-chain spec: vocab={vocab} depth={depth} step_len={step_len}")
        for a, b in pairs:
            if not (0 <= a < vocab and 0 <= b < vocab):
                raise ConfigError(f"operands {(a, b)} out of range for vocab {vocab}")
        if len(set(pairs)) != len(pairs):
            raise ConfigError("duplicate digit-chain instances")
        self.vocab_size = vocab
        self.depth = depth
        self.step_len = step_len
        self.pairs = list(pairs)
        self.horizon = depth * step_len
        self.env_id = f"digit-chain-v{vocab}-d{depth}-l{step_len}"

    def initial_states(self) -> list[State]:
        return [State(p) for p in self.pairs]

    def legal_actions(self, s: State) -> tuple[int, ...]:
        return () if s.terminal else tuple(range(self.vocab_size))

    def target(self, prompt: Key, k: int) -> int:
        a, b = prompt
        return (a + k * b) % self.vocab_size

    def _advance(self, s: State, a: int) -> State:
        tokens = s.tokens + (a,)
        n = len(tokens) - 2
        closes = n % self.step_len == 0
        return State(tokens, s.boundaries + ((len(tokens),) if closes else ()), n == self.horizon)

    def _reward(self, s: State, a: int) -> float:
        gen = s.tokens[2:] + (a,)
        if len(gen) != self.horizon:
            return 0.0
        ok = all(gen[k * self.step_len - 1] == self.target(s.tokens[:2], k) for k in range(1, self.depth + 1))
        return 1.0 if ok else 0.0


class Keyhole(TaskMdp):
    def __init__(self, vocab: int, depth: int, key_pos: int, key_token: int, step_len: int = 1, instances: int = 1):
        if vocab < 2 or depth < 1 or step_len < 1 or depth % step_len:
            raise ConfigError(f"invalid keyhole spec: vocab={vocab} depth={depth} step_len={step_len}")
        if not 0 <= key_pos < depth:
            raise ConfigError(f"key position {key_pos} outside depth {depth}")
        if not 0 <= key_token < vocab:
            raise ConfigError(f"key token {key_token} outside vocab {vocab}")
        if not 1 <= instances <= vocab:
            raise ConfigError(f"keyhole supports 1..{vocab} instances")
        self.vocab_size = vocab
        self.depth = depth
        self.horizon = depth
        self.key_pos = key_pos
        self.base_key = key_token
        self.step_len = step_len
        self.instances = instances
        self.env_id = f"keyhole-v{vocab}-d{depth}-k{key_pos}"

    def initial_states(self) -> list[State]:
        return [State((i,)) for i in range(self.instances)]

    def key_token(self, prompt: Key) -> int:
        return (self.base_key + prompt[0]) % self.vocab_size

    def legal_actions(self, s: State) -> tuple[int, ...]:
        return () if s.terminal else tuple(range(self.vocab_size))

    def _advance(self, s: State, a: int) -> State:
        tokens = s.tokens + (a,)
        n = len(tokens) - 1
        closes = n % self.step_len == 0
        return State(tokens, s.boundaries + ((len(tokens),) if closes else ()), n == self.depth)

    def _reward(self, s: State, a: int) -> float:
        gen = s.tokens[1:] + (a,)
        if len(gen) != self.depth:
            return 0.0
        return 1.0 if gen[self.key_pos] == self.key_token(s.tokens) else 0.0


MOVES = {0: (0, -1), 1: (0, 1), 2: (-1, 0), 3: (1, 0)}  # up, down, left, right as (dx, dy)
MOVE_NAMES = ("up", "down", "left", "right")


class Gridworld(TaskMdp):
    """Grid of ``width x height`` cells, cell id ``y * width + x``.

    Tokens 0..3 are moves; token ``4 + c`` observes cell ``c``.  The prompt is
    ``(obs(goal), obs(start))``.
    """

    has_observations = True
    n_moves = 4

    def __init__(self, width: int, height: int, goal: int, starts: list[int], horizon: int, walls: list[int] = ()):
        if width < 2 or height < 1 or horizon < 1:
            raise ConfigError(f"invalid grid {width}x{height}, horizon {horizon}")
        self.width, self.height = width, height
        n = width * height
        self.walls = frozenset(walls)
        if not 0 <= goal < n or goal in self.walls:
            raise ConfigError(f"invalid goal cell {goal}")
        if not starts or len(set(starts)) != len(starts):
            raise ConfigError("gridworld needs distinct start cells")
        for c in starts:
            if not 0 <= c < n or c in self.walls or c == goal:
                raise ConfigError(f"invalid start cell {c}")
        self.goal = goal
        self.starts = list(starts)
        self.horizon = horizon
        self.vocab_size = self.n_moves + n
        self.env_id = f"gridworld-{width}x{height}-g{goal}-h{horizon}"
        for c in starts:
            d = self.shortest_distance(c)
            if d is None or d > horizon:
                raise ConfigError(f"goal {goal} unreachable from {c} within horizon {horizon}")

    def obs_token(self, cell: int) -> int:
        return self.n_moves + cell

    def decode(self, token: int) -> int:
        return token - self.n_moves

    def move(self, cell: int, a: int) -> int:
        x, y = cell % self.width, cell // self.width
        dx, dy = MOVES[a]
        nx, ny = x + dx, y + dy
        if not (0 <= nx < self.width and 0 <= ny < self.height):
            return cell
        nc = ny * self.width + nx
        return cell if nc in self.walls else nc

    def shortest_distance(self, start: int) -> int | None:
        dist = {start: 0}
        queue = deque([start])
        while queue:
            c = queue.popleft()
            if c == self.goal:
                return dist[c]
            for a in MOVES:
                nc = self.move(c, a)
                if nc not in dist:
                    dist[nc] = dist[c] + 1
                    queue.append(nc)
        return None

    def initial_states(self) -> list[State]:
        return [State((self.obs_token(self.goal), self.obs_token(c))) for c in self.starts]

    def position(self, s: State) -> int:
        return self.decode(s.tokens[-1])

    def legal_actions(self, s: State) -> tuple[int, ...]:
        return () if s.terminal else tuple(range(self.n_moves))

    def _advance(self, s: State, a: int) -> State:
        cell = self.move(self.position(s), a)
        tokens = s.tokens + (a, self.obs_token(cell))
        n_actions = (len(tokens) - 2) // 2
        return State(tokens, s.boundaries + (len(tokens),), cell == self.goal or n_actions == self.horizon)

    def _reward(self, s: State, a: int) -> float:
        return 1.0 if self.move(self.position(s), a) == self.goal else 0.0


class TreeMdp(TaskMdp):
    """Explicit finite tree: legal actions and terminal rewards per token tuple."""

    def __init__(self, vocab: int, roots: list[Key], children: dict[Key, tuple[int, ...]],
                 rewards: dict[tuple[Key, int], float], env_id: str = "tree"):
        self.vocab_size = vocab
        self.roots = [tuple(r) for r in roots]
        self.children = children
        self.rewards = rewards
        self.env_id = env_id
        self.horizon = max(len(k) for k in children) - min(len(r) for r in roots) + 1 if children else 1

    def initial_states(self) -> list[State]:
        return [State(r) for r in self.roots]

    def legal_actions(self, s: State) -> tuple[int, ...]:
        return () if s.terminal else self.children[s.tokens]

    def _advance(self, s: State, a: int) -> State:
        tokens = s.tokens + (a,)
        return State(tokens, s.boundaries + (len(tokens),), tokens not in self.children)

    def _reward(self, s: State, a: int) -> float:
        return self.rewards.get((s.tokens, a), 0.0)

    def shifted(self, c: float) -> "TreeMdp":
        """Same tree with ``c`` added to every terminal reward."""
        rewards = {}
        for k, acts in self.children.items():
            for a in acts:
                if k + (a,) not in self.children:
                    rewards[(k, a)] = self.rewards.get((k, a), 0.0) + c
        return TreeMdp(self.vocab_size, self.roots, self.children, rewards, self.env_id + f"+{c}")


def single_step_mdp(rewards: tuple[float, ...] = (1.0, 0.0)) -> TreeMdp:
    """One decision between ``len(rewards)`` actions from prompt ``(0,)``."""
    root = (0,)
    acts = tuple(range(len(rewards)))
    return TreeMdp(max(2, len(rewards)), [root], {root: acts},
                   {(root, a): float(r) for a, r in zip(acts, rewards)}, "single-step")


def random_tree_mdp(rng: np.random.Generator, max_vocab: int = 4, max_depth: int = 6,
                    stop_prob: float = 0.2, max_branch: int | None = None) -> TreeMdp:
    """Random tree with sparse uniform [0, 1] terminal rewards.

    Each internal node gets a random non-empty subset of the vocabulary as
    legal actions; paths end at ``depth`` or early with ``stop_prob``.
    """
    vocab = int(rng.integers(2, max_vocab + 1))
    depth = int(rng.integers(1, max_depth + 1))
    max_branch = vocab if max_branch is None else min(max_branch, vocab)
    root = (int(rng.integers(vocab)),)
    children: dict[Key, tuple[int, ...]] = {}
    rewards: dict[tuple[Key, int], float] = {}
    stack = [(root, 0)]
    while stack:
        node, d = stack.pop()
        k = int(rng.integers(1, max_branch + 1))
        acts = tuple(sorted(int(a) for a in rng.choice(vocab, size=k, replace=False)))
        children[node] = acts
        for a in acts:
            child = node + (a,)
            if d + 1 >= depth or rng.random() < stop_prob:
                rewards[(node, a)] = float(rng.random())
            else:
                stack.append((child, d + 1))
    return TreeMdp(vocab, [root], children, rewards, f"random-tree-v{vocab}-d{depth}")


def digit_chain_pairs(vocab: int, instances: int, seed: int) -> list[tuple[int, int]]:
    all_pairs = [(a, b) for a in range(vocab) for b in range(vocab)]
    if instances >= len(all_pairs):
        return all_pairs
    idx = derive_rng(seed, "digit-chain-instances").choice(len(all_pairs), size=instances, replace=False)
    return [all_pairs[i] for i in sorted(idx)]


def make_digit_chain(spec: EnvSpec) -> DigitChain:
    if spec.instances < 1:
        raise ConfigError("instances must be >= 1")
    if spec.vocab < 2 or spec.depth < 1:
        raise ConfigError(f"invalid digit-chain spec: vocab={spec.vocab} depth={spec.depth}")
    return DigitChain(spec.vocab, spec.depth, digit_chain_pairs(spec.vocab, spec.instances, spec.seed), spec.step_len)


def make_keyhole(spec: EnvSpec) -> Keyhole:
    return Keyhole(spec.vocab, spec.depth, spec.key_pos, spec.key_token, spec.step_len, spec.instances)


def make_gridworld(spec: EnvSpec) -> Gridworld:
    return Gridworld(spec.width, spec.height, spec.goal, list(spec.starts), spec.horizon, list(spec.walls))


def make_env(spec: EnvSpec) -> TaskMdp:
    builders = {"digit-chain": make_digit_chain, "keyhole": make_keyhole, "gridworld": make_gridworld}
    if spec.family not in builders:
        raise ConfigError(f"unknown env family {spec.family!r}; expected one of {FAMILIES}")
    mdp = builders[spec.family](spec)
    reachable_states(mdp, cap=spec.state_cap)  # enforce the enumeration cap up front
    return mdp


def make_reference(mdp: TaskMdp, perturb: float = 0.0, seed: int = 0, cap: int = DEFAULT_STATE_CAP) -> PolicyTable:
    """Reference policy over all reachable states: uniform, or lightly perturbed logits."""
    states = reachable_states(mdp, cap=cap)
    if perturb == 0.0:
        return PolicyTable.from_mdp(mdp, states)
    rng = derive_rng(seed, "reference")
    return PolicyTable.from_mdp(mdp, states, lambda s, acts: perturb * rng.standard_normal(len(acts)))


def generate_offline_dataset(mdp: TaskMdp, behavior: PolicyTable, n_per_task: int = 10, seed: int = 0) -> OfflineDataset:
    """``n_per_task`` behavior rollouts per task instance, each with its own seed stream."""
    if n_per_task < 1:
        raise ConfigError("n_per_task must be positive")
    trajs: list[Trajectory] = []
    for i, s0 in enumerate(mdp.initial_states()):
        rng = derive_rng(seed, "rollout", i)
        for _ in range(n_per_task):
            trajs.append(rollout(mdp, s0, lambda s: sample_action(behavior, s, rng)))
    return OfflineDataset(trajs, mdp.env_id)


def full_coverage_dataset(mdp: TaskMdp, cap: int = DEFAULT_STATE_CAP) -> OfflineDataset:
    """Every distinct complete trajectory exactly once (depth-first order)."""
    trajs: list[Trajectory] = []
    count = 0
    for s0 in mdp.initial_states():
        stack: list[tuple[State, tuple]] = [(s0, ())]
        while stack:
            s, steps = stack.pop()
            if s.terminal:
                trajs.append(Trajectory(steps, s, mdp.env_id))
                continue
            count += 1
            if count > cap:
                raise ResourceError(f"full-coverage enumeration exceeds cap of {cap}")
            for a in reversed(mdp.legal_actions(s)):
                stack.append((mdp.transition(s, a), steps + (Step(s, a, mdp.reward(s, a)),)))
    return OfflineDataset(trajs, mdp.env_id)


def balance_dataset(ds: OfflineDataset, seed: int, max_pos: int = 4, max_neg: int = 4) -> OfflineDataset:
    """Per task keep at most ``max_pos`` positives and ``max_neg`` negatives.

    Positives never outnumber negatives, but one positive is kept whenever the
    task has any.
    """
    rng = derive_rng(seed, "balance")
    out: list[Trajectory] = []
    groups = ds.by_task()
    for key in sorted(groups):
        group = groups[key]
        pos = [t for t in group if t.total_reward > 0]
        neg = [t for t in group if t.total_reward <= 0]
        neg_keep = [neg[i] for i in sorted(rng.permutation(len(neg))[:max_neg])]
        n_pos = max(min(max_pos, len(pos), len(neg_keep)), 1 if pos else 0)
        pos_keep = [pos[i] for i in sorted(rng.permutation(len(pos))[:n_pos])]
        out.extend(pos_keep + neg_keep)
    return OfflineDataset(out, ds.env_id)
