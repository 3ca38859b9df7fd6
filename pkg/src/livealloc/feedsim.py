"""Synthetic short-video & live-stream feed environment.

Per user request the environment receives a binary decision (inject one
live stream into the video feed, or not), samples live/video watch times
from log-normal families, updates a latent per-session fatigue state, and
terminates sessions with a fatigue-dependent probability. Over-injection
therefore pays off on the current request but shortens sessions and
suppresses later watch times, so the long-run value of injecting depends
on the user and on recent decisions.

Logged trajectories carry the behavior policy's exact propensity for the
chosen action, which is what the off-policy evaluator consumes.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError

SCHEMA_VERSION = 1
WATCH_CLIP_SECONDS = 1200.0  # outermost discretization boundary


# ---------------------------------------------------------------------------
# Configuration and domain records
# ---------------------------------------------------------------------------


@dataclass
class SimConfig:
    """All free parameters of the environment. A (config, seed) pair fully
    determines every trajectory."""

    k: int = 6
    videos_per_request: int = 6  # B
    lam: float = 1.0  # penalty weight on video watch time

    # latent affinity: base + span * population rank, plus individual noise
    affinity_base: float = 0.1
    affinity_span: float = 3.0
    affinity_noise: float = 0.1

    # live watch time: lognormal location terms
    live_scale: float = 2.0
    live_sigma: float = 0.8
    quality_weight: float = 0.3
    live_fatigue_weight: float = 0.5

    # video watch time
    video_scale: float = 90.0
    video_sigma: float = 0.5
    inject_video_cut: float = 0.12
    video_fatigue_weight: float = 0.08

    # fatigue dynamics
    fatigue_gain: float = 0.6
    fatigue_decay: float = 0.8
    fatigue_cap: float = 6.0

    # session termination
    term_base: float = 0.012
    term_fatigue_slope: float = 0.02

    # time-of-day modulation
    tod_amplitude: float = 0.25
    tod_steps_per_day: int = 200

    seed: int = 0

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ConfigError(f"group count must be >= 1, got {self.k}")
        if not 1 <= self.videos_per_request < 10:
            raise ConfigError(f"videos per request must be in [1, 10), got {self.videos_per_request}")
        if self.lam < 0:
            raise ConfigError(f"penalty weight must be >= 0, got {self.lam}")
        for name in ("term_base", "term_fatigue_slope", "fatigue_decay"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        return cls(**d)


@dataclass
class CandidateLive:
    live_id: int
    author_id: int
    author_quality: float
    viewer_count: int


@dataclass
class UserProfile:
    user_id: int
    static_feature_ids: list[int]
    trailing_live_watch: float  # cumulative live watch over the trailing window
    rank: float = 0.0  # population quantile of trailing_live_watch, in (0, 1)
    group_id: int = 0
    live_affinity: float = 0.0
    fatigue: float = 0.0
    live_history: list[int] = field(default_factory=list)
    video_history: list[int] = field(default_factory=list)

    def push_history(self, history: list[int], item: int, cap: int = 50) -> None:
        history.append(item)
        if len(history) > cap:
            del history[0]


@dataclass
class Request:
    timestamp: int
    user: UserProfile
    candidate: CandidateLive
    num_videos: int
    time_of_day_phase: float

    def state_dict(self) -> dict:
        """Snapshot of everything the agent is allowed to observe."""
        u = self.user
        viewer_bucket = int(np.log1p(self.candidate.viewer_count))
        return {
            "user_static_ids": list(u.static_feature_ids),
            "live_item_ids": [
                4_000_000_000 + self.candidate.live_id,
                5_000_000_000 + self.candidate.author_id,
                6_000_000_000 + viewer_bucket,
                7_000_000_000 + (self.candidate.author_id % 2),
            ],
            "live_history_ids": list(u.live_history),
            "video_history_ids": list(u.video_history),
            "group_id": int(u.group_id),
        }


@dataclass
class StepOutcome:
    y_live: float
    y_video: float
    next_request: Request | None  # None when the session terminated
    terminated: bool


# ---------------------------------------------------------------------------
# Reward family
# ---------------------------------------------------------------------------


def reward(y_l: float, y_v: float, b: int, lam: float):
    """Per-request training reward: live watch minus scaled video watch."""
    if b == 0:
        raise ConfigError("videos per request must be nonzero")
    return y_l - (lam / b) * y_v


def penalized_reward(y_l: float, y_v: float, b: int, lam: float):
    """Constraint-substituted form; equals reward() + lam * y_l identically."""
    if b == 0:
        raise ConfigError("videos per request must be nonzero")
    return (1.0 + lam) * y_l - (lam / b) * y_v


def constraint_value(y_l: float, y_v: float, b: int):
    """Per-request constraint diagnostic: mean video watch minus live watch.

    Monitored, never enforced; values <= 0 mean the live stream held
    attention at least as well as an average video in the request.
    """
    if b == 0:
        raise ConfigError("videos per request must be nonzero")
    return (1.0 / b) * y_v - y_l


# ---------------------------------------------------------------------------
# Population construction and grouping
# ---------------------------------------------------------------------------


def assign_groups(population: Sequence[UserProfile], k: int) -> None:
    """Split users into k quantile groups by trailing live watch time.

    Users are ranked ascending, so higher trailing watch time lands in a
    higher group index; group sizes differ by at most one.
    """
    n = len(population)
    if k < 1:
        raise ConfigError(f"group count must be >= 1, got {k}")
    if k > n:
        raise ConfigError(f"cannot split {n} users into {k} groups")
    order = np.argsort([u.trailing_live_watch for u in population], kind="stable")
    for pos, idx in enumerate(order):
        population[idx].group_id = pos * k // n
        population[idx].rank = (pos + 0.5) / n


def build_population(cfg: SimConfig, num_users: int, seed: int | None = None) -> list[UserProfile]:
    """Sample a user population with group-correlated live affinity."""
    rng = np.random.default_rng([seed if seed is not None else cfg.seed, 0xBEEF])
    z = rng.normal(size=num_users)
    trailing = 10.0 * np.exp(z + 0.5 * rng.normal(size=num_users))
    users = []
    for uid in range(num_users):
        static = [
            1_000_000_000 + uid,
            2_000_000_000 + int(rng.integers(2)),  # gender bucket
            3_000_000_000 + int(rng.integers(12)),  # region bucket
        ]
        users.append(UserProfile(user_id=uid, static_feature_ids=static, trailing_live_watch=float(trailing[uid])))
    assign_groups(users, cfg.k)
    noise = rng.normal(size=num_users)
    for u in users:
        u.live_affinity = max(0.0, cfg.affinity_base + cfg.affinity_span * u.rank + cfg.affinity_noise * noise[u.user_id])
        n_live = int(rng.poisson(3.0 * u.live_affinity))
        u.live_history = [4_000_000_000 + int(rng.integers(100_000)) for _ in range(min(n_live, 50))]
        u.video_history = [8_000_000_000 + int(rng.integers(500_000)) for _ in range(10)]
    return users


# ---------------------------------------------------------------------------
# Environment dynamics
# ---------------------------------------------------------------------------


def make_request(user: UserProfile, timestamp: int, cfg: SimConfig, rng: np.random.Generator) -> Request:
    candidate = CandidateLive(
        live_id=int(rng.integers(100_000)),
        author_id=int(rng.integers(20_000)),
        author_quality=float(np.clip(rng.normal(), -2.0, 2.0)),
        viewer_count=int(np.exp(rng.normal(5.0, 1.0))),
    )
    phase = (timestamp % cfg.tod_steps_per_day) / cfg.tod_steps_per_day
    return Request(
        timestamp=timestamp,
        user=user,
        candidate=candidate,
        num_videos=cfg.videos_per_request,
        time_of_day_phase=phase,
    )


def _clipped_lognormal(rng: np.random.Generator, mu: float, sigma: float) -> float:
    return float(np.clip(np.exp(rng.normal(mu, sigma)), 0.0, WATCH_CLIP_SECONDS))


def step(request: Request, action: int, cfg: SimConfig, rng: np.random.Generator) -> StepOutcome:
    """Execute one allocation decision and advance the session.

    Injecting yields a live watch time whose location rises with the
    user's affinity and the author's quality and falls with fatigue, and
    bumps fatigue; skipping lets fatigue decay. Video watch time shrinks
    when a live stream is present and when fatigue is high. The session
    terminates with probability increasing in fatigue.
    """
    user = request.user
    tod = cfg.tod_amplitude * np.sin(2.0 * np.pi * request.time_of_day_phase)

    if action == 1:
        mu_l = (
            np.log(cfg.live_scale)
            + user.live_affinity
            + cfg.quality_weight * request.candidate.author_quality
            - cfg.live_fatigue_weight * user.fatigue
            + tod
        )
        y_l = _clipped_lognormal(rng, mu_l, cfg.live_sigma)
    else:
        y_l = 0.0

    mu_v = (
        np.log(cfg.video_scale)
        - cfg.inject_video_cut * (1 if action == 1 else 0)
        - cfg.video_fatigue_weight * user.fatigue
        + 0.3 * tod
    )
    y_v = _clipped_lognormal(rng, mu_v, cfg.video_sigma)

    if action == 1:
        user.fatigue = min(user.fatigue + cfg.fatigue_gain, cfg.fatigue_cap)
        user.push_history(user.live_history, 4_000_000_000 + request.candidate.live_id)
    else:
        user.fatigue *= cfg.fatigue_decay
    user.push_history(user.video_history, 8_000_000_000 + int(rng.integers(500_000)))

    p_term = min(1.0, cfg.term_base + cfg.term_fatigue_slope * user.fatigue)
    if rng.random() < p_term:
        return StepOutcome(y_l, y_v, None, True)
    return StepOutcome(y_l, y_v, make_request(user, request.timestamp + 1, cfg, rng), False)


# ---------------------------------------------------------------------------
# Behavior policies
# ---------------------------------------------------------------------------


class Policy:
    """Minimal interface: action probabilities given an observed state."""

    def probs(self, state: dict) -> tuple[float, float]:
        raise NotImplementedError

    def act(self, state: dict, rng: np.random.Generator) -> tuple[int, float]:
        p0, p1 = self.probs(state)
        action = 1 if rng.random() < p1 else 0
        propensity = p1 if action == 1 else p0
        if propensity <= 0.0:
            raise DataError(f"behavior policy chose an action with zero propensity (probs={p0}, {p1})")
        return action, propensity


class UniformPolicy(Policy):
    def probs(self, state: dict) -> tuple[float, float]:
        return (0.5, 0.5)


class AlwaysInjectPolicy(Policy):
    def probs(self, state: dict) -> tuple[float, float]:
        return (0.0, 1.0)


class NeverInjectPolicy(Policy):
    def probs(self, state: dict) -> tuple[float, float]:
        return (1.0, 0.0)


class GroupHeuristicPolicy(Policy):
    """Epsilon-soft heuristic: injection probability rises with group index."""

    def __init__(self, k: int, low: float = 0.15, high: float = 0.5):
        if not (0.0 < low <= high < 1.0):
            raise ConfigError(f"heuristic probabilities must satisfy 0 < low <= high < 1, got {low}, {high}")
        self.p_inject = np.linspace(low, high, k)

    def probs(self, state: dict) -> tuple[float, float]:
        p1 = float(self.p_inject[state["group_id"]])
        return (1.0 - p1, p1)


BEHAVIOR_POLICIES: dict[str, Callable[[SimConfig], Policy]] = {
    "uniform": lambda cfg: UniformPolicy(),
    "always": lambda cfg: AlwaysInjectPolicy(),
    "never": lambda cfg: NeverInjectPolicy(),
    "group_heuristic": lambda cfg: GroupHeuristicPolicy(cfg.k),
}


# ---------------------------------------------------------------------------
# Trajectory logging
# ---------------------------------------------------------------------------


def run_session(
    user: UserProfile,
    policy: Policy,
    cfg: SimConfig,
    rng: np.random.Generator,
    max_steps: int,
) -> list[dict]:
    """Roll one session; returns raw per-step records (not yet paired)."""
    records = []
    request = make_request(user, 0, cfg, rng)
    for _ in range(max_steps):
        state = request.state_dict()
        action, propensity = policy.act(state, rng)
        outcome = step(request, action, cfg, rng)
        records.append(
            {
                "state": state,
                "action": action,
                "y_l": outcome.y_live,
                "y_v": outcome.y_video,
                "reward": reward(outcome.y_live, outcome.y_video, cfg.videos_per_request, cfg.lam),
                "propensity": propensity,
            }
        )
        if outcome.terminated:
            break
        request = outcome.next_request
    return records


def _session_transitions(trajectory_id: int, steps: list[dict]) -> Iterator[dict]:
    """Pair consecutive step records into logged transition rows."""
    for t, rec in enumerate(steps):
        nxt = steps[t + 1] if t + 1 < len(steps) else None
        row = {
            "record": "transition",
            "trajectory_id": trajectory_id,
            "t": t,
            "group_id": rec["state"]["group_id"],
            "state": rec["state"],
            "action": rec["action"],
            "y_l": rec["y_l"],
            "y_v": rec["y_v"],
            "reward": rec["reward"],
            "behavior_propensity": rec["propensity"],
            "terminal": nxt is None,
            "next_state": nxt["state"] if nxt else None,
            "next_action": nxt["action"] if nxt else None,
            "next_y_l": nxt["y_l"] if nxt else None,
            "next_y_v": nxt["y_v"] if nxt else None,
            "next_reward": nxt["reward"] if nxt else None,
        }
        yield row


def generate_log(
    cfg: SimConfig,
    behavior_policy: Policy | str,
    num_users: int,
    max_steps: int,
    out_path: str | Path,
    seed: int | None = None,
) -> int:
    """Simulate `num_users` sessions and stream transitions to an NDJSON file.

    The first line is a header record carrying the schema version and the
    resolved config; each following line is one transition. Deterministic
    given (cfg, seed): per-user RNG streams are derived from (seed, user_id).
    Returns the number of transitions written.
    """
    seed = cfg.seed if seed is None else seed
    if isinstance(behavior_policy, str):
        if behavior_policy not in BEHAVIOR_POLICIES:
            raise ConfigError(f"unknown behavior policy {behavior_policy!r}")
        behavior_name = behavior_policy
        behavior_policy = BEHAVIOR_POLICIES[behavior_policy](cfg)
    else:
        behavior_name = type(behavior_policy).__name__

    population = build_population(cfg, num_users, seed=seed)
    count = 0
    with open(out_path, "w", encoding="utf-8") as fh:
        header = {
            "record": "header",
            "schema_version": SCHEMA_VERSION,
            "sim_config": cfg.to_dict(),
            "behavior_policy": behavior_name,
            "num_users": num_users,
            "max_steps": max_steps,
            "seed": seed,
        }
        fh.write(json.dumps(header) + "\n")
        for user in population:
            rng = np.random.default_rng([seed, user.user_id])
            steps = run_session(user, behavior_policy, cfg, rng, max_steps)
            for row in _session_transitions(user.user_id, steps):
                fh.write(json.dumps(row) + "\n")
                count += 1
    return count
