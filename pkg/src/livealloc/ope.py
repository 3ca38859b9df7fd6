"""Offline policy evaluation.

The main estimator is normalized capped importance sampling over logged
transitions: per-step likelihood ratios against the recorded behavior
propensities, capped at a configurable constant, self-normalized by the
weight sum. A cumulative figure (ratio estimate scaled by the trajectory
count) is reported alongside the ratio form.

Tabular value iteration and exhaustive policy enumeration are included as
exact oracles for verifying the learned critic on small MDPs.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .dataset import TransitionArrays
from .errors import ConfigError, DataError


@dataclass
class NcisReport:
    ratio_estimate: float
    cumulative_estimate: float
    num_trajectories: int
    num_transitions: int
    effective_sample_size: float
    weight_clip_fraction: float
    cap: float
    gamma: float

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "ratio_estimate": self.ratio_estimate,
            "cumulative_estimate": self.cumulative_estimate,
            "num_trajectories": self.num_trajectories,
            "num_transitions": self.num_transitions,
            "effective_sample_size": self.effective_sample_size,
            "weight_clip_fraction": self.weight_clip_fraction,
            "cap": self.cap,
            "gamma": self.gamma,
        }


def _target_probs(data: TransitionArrays, policy) -> np.ndarray:
    if isinstance(policy, np.ndarray):
        probs = policy
    elif hasattr(policy, "probs_batch"):
        probs = policy.probs_batch(data.states)
    else:
        raise ConfigError(f"cannot evaluate policy of type {type(policy).__name__}")
    if probs.shape != (data.n, 2):
        raise ConfigError(f"policy probabilities have shape {probs.shape}, expected {(data.n, 2)}")
    return probs


def ncis(data: TransitionArrays, policy, cap: float = 10.0, gamma: float = 0.9) -> NcisReport:
    """Normalized capped importance sampling estimate of a policy's value.

    Step-wise weights w_t = min(pi(a_t|s_t) / pi_b(a_t|s_t), cap); the
    ratio estimate is sum(w_t gamma^t r_t) / sum(w_t) with t counted
    within each trajectory, and the cumulative estimate scales the ratio
    by the number of evaluation trajectories.
    """
    if cap <= 0:
        raise ConfigError(f"weight cap must be positive, got {cap}")
    if np.any(data.propensities <= 0.0):
        bad = int(np.argmax(data.propensities <= 0.0))
        raise DataError(
            f"zero behavior propensity at transition index {bad} "
            f"(trajectory {data.traj_ids[bad]}, t={data.t[bad]})"
        )
    probs = _target_probs(data, policy)
    pi_logged = probs[np.arange(data.n), data.actions]
    ratios = pi_logged / data.propensities
    weights = np.minimum(ratios, cap)
    discounted = (gamma ** data.t) * data.rewards
    wsum = weights.sum()
    if wsum <= 0.0:
        raise DataError("all importance weights are zero; the target policy never takes logged actions")
    ratio_estimate = float(np.sum(weights * discounted) / wsum)
    n_traj = len(np.unique(data.traj_ids))
    ess = float(wsum * wsum / np.sum(weights * weights))
    return NcisReport(
        ratio_estimate=ratio_estimate,
        cumulative_estimate=ratio_estimate * n_traj,
        num_trajectories=n_traj,
        num_transitions=int(data.n),
        effective_sample_size=ess,
        weight_clip_fraction=float(np.mean(ratios > cap)),
        cap=float(cap),
        gamma=float(gamma),
    )


def bootstrap_ncis(
    data: TransitionArrays,
    policy,
    cap: float = 10.0,
    gamma: float = 0.9,
    n_boot: int = 200,
    seed: int = 0,
) -> dict:
    """Percentile bootstrap over trajectories for the NCIS ratio estimate."""
    probs = _target_probs(data, policy)
    traj_ids = np.unique(data.traj_ids)
    rng = np.random.default_rng([seed, 0xB001])
    samples = []
    by_traj = {tid: np.flatnonzero(data.traj_ids == tid) for tid in traj_ids}
    for _ in range(n_boot):
        chosen = rng.choice(traj_ids, size=len(traj_ids), replace=True)
        idx = np.concatenate([by_traj[tid] for tid in chosen])
        samples.append(ncis(data.take(idx), probs[idx], cap=cap, gamma=gamma).ratio_estimate)
    samples_arr = np.array(samples)
    return {
        "mean": float(samples_arr.mean()),
        "lo95": float(np.percentile(samples_arr, 2.5)),
        "hi95": float(np.percentile(samples_arr, 97.5)),
        "n_boot": n_boot,
    }


# ---------------------------------------------------------------------------
# Tabular oracles
# ---------------------------------------------------------------------------


@dataclass
class TabularMDP:
    transitions: np.ndarray  # (S, A, S) row-stochastic in the last axis
    rewards: np.ndarray  # (S, A)
    gamma: float

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"discount must be in [0, 1), got {self.gamma}")
        sums = self.transitions.sum(axis=-1)
        if not np.allclose(sums, 1.0, atol=1e-12):
            raise ConfigError("transition rows must sum to 1")

    @property
    def n_states(self) -> int:
        return self.rewards.shape[0]

    @property
    def n_actions(self) -> int:
        return self.rewards.shape[1]


def value_iteration(mdp: TabularMDP, tolerance: float = 1e-10) -> np.ndarray:
    """Bellman-optimality iteration to sup-norm `tolerance`; returns Q*."""
    q = np.zeros_like(mdp.rewards)
    while True:
        v = q.max(axis=1)
        q_new = mdp.rewards + mdp.gamma * mdp.transitions @ v
        if np.max(np.abs(q_new - q)) < tolerance:
            return q_new
        q = q_new


def exhaustive_policy_eval(mdp: TabularMDP, horizon: int) -> tuple[tuple[int, ...], float]:
    """Exact finite-horizon evaluation of every deterministic policy.

    Returns the best (policy, value) under a uniform initial state
    distribution. Refuses state/action spaces beyond 4^states policies.
    """
    n_pol = mdp.n_actions**mdp.n_states
    if n_pol > 4**mdp.n_states:
        raise ConfigError(f"{n_pol} policies exceed the enumeration bound {4 ** mdp.n_states}")
    best_policy, best_value = None, -np.inf
    for policy in itertools.product(range(mdp.n_actions), repeat=mdp.n_states):
        r_pi = mdp.rewards[np.arange(mdp.n_states), policy]
        p_pi = mdp.transitions[np.arange(mdp.n_states), policy]
        v = np.zeros(mdp.n_states)
        for _ in range(horizon):
            v = r_pi + mdp.gamma * p_pi @ v
        value = float(v.mean())
        if value > best_value:
            best_policy, best_value = policy, value
    return best_policy, best_value
