"""Checkpoint text format and metrics JSONL.

Checkpoint layout::

    oreo-ckpt v1
    # key: value          (free-form metadata lines)
    S 0,1 | logits: 0:0.0,1:0.25 | V: 0.5
    S 0,1,3 | V: 0.75     (value-only row, e.g. a pre-observation afterstate)

Floats are written with ``repr`` so a save/load round trip is exact.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import TextIO

import numpy as np

from .errors import ContractError
from .mdp import Key, PolicyTable, ValueTable

HEADER = "oreo-ckpt v1"


def _fmt_key(k: Key) -> str:
    return ",".join(str(t) for t in k)


def write_checkpoint(fh: TextIO, policy: PolicyTable | None, value: ValueTable | None,
                     meta: dict[str, object] | None = None, vocab: int | None = None) -> None:
    fh.write(HEADER + "\n")
    if vocab is None and policy is not None:
        vocab = policy.logits.shape[1]
    fh.write(f"# vocab: {vocab}\n")
    for name, val in (meta or {}).items():
        fh.write(f"# {name}: {val}\n")
    done: set[Key] = set()
    if policy is not None:
        for i, k in enumerate(policy.keys):
            acts = np.flatnonzero(policy.legal[i])
            logits = ",".join(f"{a}:{float(policy.logits[i, a])!r}" for a in acts)
            line = f"S {_fmt_key(k)} | logits: {logits}"
            if value is not None and k in value.index:
                line += f" | V: {float(value.values[value.index[k]])!r}"
            fh.write(line + "\n")
            done.add(k)
    if value is not None:
        for k, v in zip(value.keys, value.values):
            if k not in done:
                fh.write(f"S {_fmt_key(k)} | V: {float(v)!r}\n")


def read_checkpoint(fh: TextIO) -> tuple[PolicyTable, ValueTable, dict[str, str]]:
    first = fh.readline().rstrip("\n")
    if first != HEADER:
        raise ContractError(f"not an oreo checkpoint (header {first!r})")
    meta: dict[str, str] = {}
    pol_keys, pol_rows = [], []
    val_keys, val_vals = [], []
    for line in fh:
        line = line.rstrip("\n")
        if not line:
            continue
        if line.startswith("#"):
            name, _, val = line[1:].partition(":")
            meta[name.strip()] = val.strip()
            continue
        if not line.startswith("S "):
            raise ContractError(f"malformed checkpoint line: {line!r}")
        parts = [p.strip() for p in line[2:].split("|")]
        key = tuple(int(t) for t in parts[0].split(",")) if parts[0] else ()
        for part in parts[1:]:
            field, _, body = part.partition(":")
            field = field.strip()
            if field == "logits":
                entries = [e.split(":") for e in body.strip().split(",") if e]
                pol_keys.append(key)
                pol_rows.append({int(a): float(z) for a, z in entries})
            elif field == "V":
                val_keys.append(key)
                val_vals.append(float(body))
            else:
                raise ContractError(f"unknown checkpoint field {field!r}")
    vocab = int(meta.get("vocab", 0)) or (1 + max((max(r) for r in pol_rows), default=1))
    logits = np.zeros((len(pol_keys), vocab))
    legal = np.zeros((len(pol_keys), vocab), dtype=bool)
    for i, row in enumerate(pol_rows):
        for a, z in row.items():
            logits[i, a] = z
            legal[i, a] = True
    return PolicyTable(pol_keys, logits, legal), ValueTable(val_keys, val_vals), meta


@dataclass
class MetricsRecord:
    step: int
    value_loss: float
    policy_loss: float
    mean_kl: float
    max_residual: float
    greedy_success: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def write_metrics(fh: TextIO, history: list[MetricsRecord]) -> None:
    for rec in history:
        fh.write(rec.to_json() + "\n")
