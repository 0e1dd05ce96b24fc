"""Exact KL-regularized soft values by backward induction on the state tree.

For a non-terminal state ``s`` with successor ``s'`` under action ``a``::

    Q*(s, a) = r(s, a) + beta * log ref(a|s) + V*(s')
    V*(s)    = beta * logsumexp(Q*(s, .) / beta)
    pi*(a|s) = exp((Q*(s, a) - V*(s)) / beta)

and ``V*(terminal) = 0``.  The brute-force routine enumerates every
trajectory instead and serves as an independent check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import ContractError, ResourceError, UnsupportedSupportError
from .mdp import DEFAULT_STATE_CAP, Key, PolicyTable, State, TaskMdp, ValueTable, reachable_states

LOG_FLOOR = -700.0


@dataclass
class OracleResult:
    v_star: ValueTable
    q_star: dict[tuple[Key, int], float]
    pi_star: PolicyTable
    beta: float


def _ref_log_probs(ref: PolicyTable, s: State, acts: tuple[int, ...]) -> np.ndarray:
    lp = ref.log_probs(s)[list(acts)]
    if not np.all(np.isfinite(lp)):
        raise UnsupportedSupportError(f"reference has a support hole at {s.tokens}")
    return np.maximum(lp, LOG_FLOOR)


def soft_backward_induction(
    mdp: TaskMdp,
    ref: PolicyTable,
    beta: float,
    cap: int = DEFAULT_STATE_CAP,
    afterstates: bool | None = None,
) -> OracleResult:
    """Optimal soft value, Q and policy over every reachable state.

    When ``afterstates`` is true (default for environments with observations)
    the value table also holds ``V*(s || a) = r(s, a) + V*(s')`` for the
    pre-observation sequence of every action.
    """
    if beta <= 0:
        raise ContractError("beta must be positive")
    if afterstates is None:
        afterstates = mdp.has_observations
    values: dict[Key, float] = {}
    q: dict[tuple[Key, int], float] = {}
    policy_rows: dict[Key, tuple[tuple[int, ...], np.ndarray]] = {}
    after: dict[Key, float] = {}
    visited = 0

    # iterative post-order DFS; each state is evaluated exactly once
    for root in mdp.initial_states():
        stack: list[tuple[State, bool]] = [(root, False)]
        while stack:
            s, expanded = stack.pop()
            if s.terminal or (s.tokens in values and not expanded):
                continue
            acts = mdp.legal_actions(s)
            if not expanded:
                visited += 1
                if visited > cap:
                    raise ResourceError(f"oracle state count exceeds cap of {cap}")
                stack.append((s, True))
                for a in reversed(acts):
                    nxt = mdp.transition(s, a)
                    if not nxt.terminal and nxt.tokens not in values:
                        stack.append((nxt, False))
                continue
            log_ref = _ref_log_probs(ref, s, acts)
            qs = np.empty(len(acts))
            for k, a in enumerate(acts):
                nxt = mdp.transition(s, a)
                r = mdp.reward(s, a)
                v_next = 0.0 if nxt.terminal else values[nxt.tokens]
                qs[k] = r + beta * log_ref[k] + v_next
                q[(s.tokens, a)] = float(qs[k])
                if afterstates:
                    after[mdp.afterstate_key(s, a)] = r + v_next
            v = beta * float(logsumexp(qs / beta))
            values[s.tokens] = v
            logits = np.zeros(mdp.vocab_size)
            logits[list(acts)] = (qs - v) / beta
            policy_rows[s.tokens] = (acts, logits)

    keys = list(values)
    legal = np.zeros((len(keys), mdp.vocab_size), dtype=bool)
    logits = np.zeros((len(keys), mdp.vocab_size))
    for i, k in enumerate(keys):
        acts, row = policy_rows[k]
        legal[i, list(acts)] = True
        logits[i] = row
    v_keys = keys + [k for k in after if k not in values]
    v_vals = [values[k] for k in keys] + [after[k] for k in v_keys[len(keys):]]
    return OracleResult(ValueTable(v_keys, v_vals), q, PolicyTable(keys, logits, legal), beta)


def brute_force_soft_value(
    mdp: TaskMdp, ref: PolicyTable, beta: float, s: State, cap: int = 1_000_000
) -> float:
    """``beta * log sum_tau prod ref(a_t|s_t) * exp(R(tau)/beta)`` by enumeration."""
    if s.terminal:
        return 0.0
    exponents: list[float] = []
    stack: list[tuple[State, float, float]] = [(s, 0.0, 0.0)]
    while stack:
        cur, logp, ret = stack.pop()
        if cur.terminal:
            exponents.append(logp + ret / beta)
            if len(exponents) > cap:
                raise ResourceError(f"trajectory enumeration exceeds cap of {cap}")
            continue
        acts = mdp.legal_actions(cur)
        log_ref = _ref_log_probs(ref, cur, acts)
        for k, a in enumerate(acts):
            stack.append((mdp.transition(cur, a), logp + log_ref[k], ret + mdp.reward(cur, a)))
    return beta * float(logsumexp(exponents))


def bellman_residual(
    pi: PolicyTable,
    v: ValueTable,
    mdp: TaskMdp,
    ref: PolicyTable,
    beta: float,
    states: list[State] | None = None,
) -> float:
    """Max |V(s) - V(s') - r + beta*log(pi/ref)| over reachable (s, a)."""
    if states is None:
        states = reachable_states(mdp)
    worst = 0.0
    for s in states:
        if s.terminal:
            continue
        lp = pi.log_probs(s)
        lq = ref.log_probs(s)
        vs = v[s]
        for a in mdp.legal_actions(s):
            if not np.isfinite(lq[a]):
                raise UnsupportedSupportError(f"reference has a support hole at {s.tokens}")
            nxt = mdp.transition(s, a)
            res = vs - v[nxt] - mdp.reward(s, a) + beta * (lp[a] - lq[a])
            worst = max(worst, abs(float(res)))
    return worst
