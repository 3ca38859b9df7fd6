"""Reading logged-trajectory files into batched numpy arrays."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig, StateBatch, batch_from_states
from .errors import DataError
from .feedsim import SCHEMA_VERSION


@dataclass
class LoggedDataset:
    header: dict
    transitions: list[dict]

    @property
    def n(self) -> int:
        return len(self.transitions)

    def trajectory_ids(self) -> list[int]:
        seen: dict[int, None] = {}
        for t in self.transitions:
            seen.setdefault(t["trajectory_id"], None)
        return list(seen)

    def subset(self, traj_ids) -> "LoggedDataset":
        keep = set(traj_ids)
        return LoggedDataset(self.header, [t for t in self.transitions if t["trajectory_id"] in keep])


def read_log(path: str | Path) -> LoggedDataset:
    """Parse an NDJSON trajectory log, validating the OPE contract."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"log file not found: {path}")
    header: dict | None = None
    transitions: list[dict] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if rec.get("record") == "header":
                if rec.get("schema_version") != SCHEMA_VERSION:
                    raise DataError(f"unsupported log schema version {rec.get('schema_version')!r}")
                header = rec
                continue
            if rec.get("record") != "transition":
                raise DataError(f"{path}:{lineno}: unknown record kind {rec.get('record')!r}")
            if not rec["behavior_propensity"] > 0.0:
                raise DataError(f"{path}:{lineno}: transition has zero behavior propensity")
            transitions.append(rec)
    if header is None:
        raise DataError(f"{path}: missing header record")
    return LoggedDataset(header, transitions)


def split_by_trajectory(ds: LoggedDataset, eval_fraction: float, seed: int = 0) -> tuple[LoggedDataset, LoggedDataset]:
    """Deterministic trajectory-level train/eval split."""
    ids = ds.trajectory_ids()
    rng = np.random.default_rng([seed, 0x5917])
    perm = rng.permutation(len(ids))
    n_eval = max(1, int(round(eval_fraction * len(ids))))
    eval_ids = {ids[i] for i in perm[:n_eval]}
    train_ids = [i for i in ids if i not in eval_ids]
    return ds.subset(train_ids), ds.subset(sorted(eval_ids))


@dataclass
class TransitionArrays:
    """Column-oriented view of a dataset, ready for batched forward passes.

    Terminal rows carry zero-filled next-step columns; the `terminal` mask
    is what downstream label computation must consult.
    """

    states: StateBatch
    actions: np.ndarray
    y_l: np.ndarray
    y_v: np.ndarray
    rewards: np.ndarray
    propensities: np.ndarray
    next_states: StateBatch
    next_actions: np.ndarray
    next_y_l: np.ndarray
    next_y_v: np.ndarray
    terminal: np.ndarray
    traj_ids: np.ndarray
    t: np.ndarray

    @property
    def n(self) -> int:
        return len(self.actions)

    def take(self, idx: np.ndarray) -> "TransitionArrays":
        return TransitionArrays(
            self.states.take(idx),
            self.actions[idx],
            self.y_l[idx],
            self.y_v[idx],
            self.rewards[idx],
            self.propensities[idx],
            self.next_states.take(idx),
            self.next_actions[idx],
            self.next_y_l[idx],
            self.next_y_v[idx],
            self.terminal[idx],
            self.traj_ids[idx],
            self.t[idx],
        )


def build_arrays(ds: LoggedDataset, enc_cfg: EncoderConfig) -> TransitionArrays:
    rows = ds.transitions
    if not rows:
        raise DataError("dataset has no transitions")
    states = batch_from_states([r["state"] for r in rows], enc_cfg)
    dummy = rows[0]["state"]
    next_states = batch_from_states([r["next_state"] if r["next_state"] else dummy for r in rows], enc_cfg)
    g = lambda key, default=0.0: np.array([r[key] if r[key] is not None else default for r in rows], dtype=np.float64)
    return TransitionArrays(
        states=states,
        actions=np.array([r["action"] for r in rows], dtype=np.int64),
        y_l=g("y_l"),
        y_v=g("y_v"),
        rewards=g("reward"),
        propensities=g("behavior_propensity"),
        next_states=next_states,
        next_actions=np.array([r["next_action"] if r["next_action"] is not None else 0 for r in rows], dtype=np.int64),
        next_y_l=g("next_y_l"),
        next_y_v=g("next_y_v"),
        terminal=np.array([bool(r["terminal"]) for r in rows]),
        traj_ids=np.array([r["trajectory_id"] for r in rows], dtype=np.int64),
        t=np.array([r["t"] for r in rows], dtype=np.int64),
    )
