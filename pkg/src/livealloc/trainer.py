"""Off-policy training loop and experiment drivers.

One optimizer step per batch on L = actor loss + TD critic loss +
supervised ratio loss, with per-path learning rates (the embedding table
trains slower than the hidden layers), global-norm gradient clipping,
periodic target sync, probe-batch metrics, a degenerate-policy detector,
and versioned atomic policy snapshots for the acting side.

Every published variant of the algorithm is reachable through ablation
flags; `run_variant_suite` trains and evaluates a list of them on shared
data and seeds.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import json
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import feedsim
from .actor import ActorHead, ActorPolicy, actor_loss
from .critic import (
    CriticHyper,
    CriticPair,
    TimeBinSpec,
    bin_arrays,
    critic_loss,
    normalized_reward,
    q_label,
    q_label_vanilla,
    q_min_both_actions,
    sl_loss,
    target_q_min,
)
from .dataset import LoggedDataset, TransitionArrays, build_arrays
from .encoder import Encoder, EncoderConfig, batch_from_states
from .errors import ConfigError, NumericFault
from .mgsd import ACTOR_TEMPLATE, RATIO_TEMPLATE, RESIDUAL_TEMPLATE
from .nn import AdamState, ParamSet, adam_step, clip_grad_norm, load_params, save_params

METRICS_HEADER = ["step", "L_actor", "L_critic", "L_SL", "mean_Q", "max_Q", "alloc_ratio", "wall_ms"]
COLLAPSE_WINDOW = 50  # consecutive pinned probe evaluations that flag a run


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class AblationFlags:
    no_mg: bool = False  # single shared head instead of K group heads
    no_dd: bool = False  # regress watch time / 1200 instead of binned ratios
    no_sl: bool = False  # drop the supervised ratio loss
    no_ln: bool = False  # skip input layer normalization in every tower
    no_sg: bool = False  # let actor gradients flow into the encoder
    no_qnorm: bool = False  # raw critic value instead of softmax weight
    gamma_zero: bool = False  # discount 0: critic degenerates to reward prediction
    sep_actor: bool = False  # optimize the actor in its own pass
    vanilla_label: bool = False  # expectation labels under the actor instead of max

    @classmethod
    def from_names(cls, names) -> "AblationFlags":
        if isinstance(names, str):
            names = [n for n in names.replace(",", " ").split() if n]
        flags = cls()
        for name in names:
            if not hasattr(flags, name):
                raise ConfigError(f"unknown ablation flag {name!r}")
            setattr(flags, name, True)
        return flags

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def names(self) -> list[str]:
        return [k for k, v in self.to_dict().items() if v]


#: named variants: flag sets compose left to right
VARIANTS: dict[str, tuple[str, ...]] = {
    "full": (),
    "no_mg": ("no_mg",),
    "no_mg_dd": ("no_mg", "no_dd"),
    "no_mg_dd_sl": ("no_mg", "no_dd", "no_sl"),
    "no_ln": ("no_ln",),
    "no_sg": ("no_sg",),
    "no_qnorm": ("no_qnorm",),
    "gamma0": ("gamma_zero",),
    "sep_actor": ("sep_actor",),
    "vanilla_label": ("vanilla_label",),
}


@dataclass
class TrainConfig:
    batch_size: int = 2048
    epochs: int = 500
    lr_embedding: float = 1e-5
    lr_hidden: float = 1e-3
    gamma: float = 0.9
    k: int = 6
    lam: float = 1.0
    videos_per_request: int = 6
    huber_delta: float = 1.0
    tau_r: float = 100.0
    sync_mode: str = "hard"
    sync_period: int = 100
    polyak_tau: float = 0.005
    grad_clip: float = 10.0
    seed: int = 0
    eval_every: int = 10
    probe_size: int = 4096
    publish_every: int = 50
    max_steps: int | None = None  # explicit step budget; otherwise derived from epochs
    metrics_start: int = 0  # probe metrics logged only after this step (steady-state stats)
    epsilon: float = 0.2  # exploration for streaming collection
    ablation: AblationFlags = field(default_factory=AblationFlags)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    actor_template: tuple = ACTOR_TEMPLATE
    ratio_template: tuple = RATIO_TEMPLATE
    residual_template: tuple = RESIDUAL_TEMPLATE

    def __post_init__(self):
        latent = self.encoder.latent_dim
        for name, tmpl in (
            ("actor_template", self.actor_template),
            ("ratio_template", self.ratio_template),
            ("residual_template", self.residual_template),
        ):
            if tmpl[0] != latent:
                raise ConfigError(f"{name} input width {tmpl[0]} != encoder latent dim {latent}")

    @property
    def effective_k(self) -> int:
        return 1 if self.ablation.no_mg else self.k

    @property
    def effective_gamma(self) -> float:
        return 0.0 if self.ablation.gamma_zero else self.gamma

    def bins(self) -> TimeBinSpec:
        return TimeBinSpec.degenerate() if self.ablation.no_dd else TimeBinSpec()

    def hyper(self) -> CriticHyper:
        return CriticHyper(
            gamma=self.effective_gamma,
            lam=self.lam,
            videos_per_request=self.videos_per_request,
            tau_r=self.tau_r,
            huber_delta=self.huber_delta,
            apply_layer_norm=not self.ablation.no_ln,
        )

    def steps_for(self, n_transitions: int) -> int:
        if self.max_steps is not None:
            return self.max_steps
        return max(1, self.epochs * max(1, n_transitions // self.batch_size))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["encoder"] = dataclasses.asdict(self.encoder)
        d["ablation"] = self.ablation.to_dict()
        for key in ("actor_template", "ratio_template", "residual_template"):
            d[key] = list(d[key])
        d["encoder"]["mlp_widths"] = list(self.encoder.mlp_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "encoder" in d:
            enc = dict(d["encoder"])
            if "mlp_widths" in enc:
                enc["mlp_widths"] = tuple(enc["mlp_widths"])
            d["encoder"] = EncoderConfig(**enc)
        if "ablation" in d:
            d["ablation"] = AblationFlags(**d["ablation"])
        for key in ("actor_template", "ratio_template", "residual_template"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def config_digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Model assembly
# ---------------------------------------------------------------------------


class Model:
    """Encoder + actor head + clipped critic pair over one ParamSet."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.params = ParamSet()
        rng = np.random.default_rng([cfg.seed, 0xA11C])
        self.encoder = Encoder(self.params, cfg.encoder, rng)
        self.actor = ActorHead(self.params, cfg.effective_k, rng, cfg.actor_template)
        self.bins = cfg.bins()
        self.critics = CriticPair(
            self.params, cfg.effective_k, self.bins, rng, cfg.ratio_template, cfg.residual_template
        )
        self.hyper = cfg.hyper()
        # towers inside the training loop receive a pre-normalized input,
        # so their own normalization stays off; semantics are unchanged
        self._hyper_inner = dataclasses.replace(self.hyper, apply_layer_norm=False)
        self.params.freeze_layout()

    def tower_input(self, h: ad.Tensor) -> ad.Tensor:
        from .nn import layer_norm

        return layer_norm(h) if self.hyper.apply_layer_norm else h

    def route_groups(self, group_ids: np.ndarray) -> np.ndarray:
        k = self.cfg.effective_k
        if k == 1:
            return np.zeros_like(np.asarray(group_ids))
        return np.where(np.asarray(group_ids) < k, group_ids, 0)

    def policy(self, epsilon: float = 0.0) -> ActorPolicy:
        return ActorPolicy(
            self.params,
            self.encoder,
            self.actor,
            self.cfg.encoder,
            self.cfg.effective_k,
            apply_layer_norm=not self.cfg.ablation.no_ln,
            epsilon=epsilon,
        )


# ---------------------------------------------------------------------------
# Policy snapshots
# ---------------------------------------------------------------------------


def _snapshot_digest(version: int, params: ParamSet, config_digest: str) -> str:
    h = hashlib.sha256()
    h.update(str(version).encode())
    h.update(config_digest.encode())
    for path in sorted(params.paths()):
        h.update(path.encode())
        h.update(np.ascontiguousarray(params[path].data, dtype="<f8").tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class PolicySnapshot:
    """Immutable copy of the acting-side parameters, integrity-hashed."""

    version: int
    params: ParamSet
    config_digest: str
    digest: str

    def verify(self) -> bool:
        return _snapshot_digest(self.version, self.params, self.config_digest) == self.digest


class SnapshotPublisher:
    """Single-writer, many-reader snapshot channel.

    `publish` swaps in a fully built immutable snapshot under a lock;
    readers always observe either the previous or the new complete
    snapshot. Versions increase strictly.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._latest: PolicySnapshot | None = None
        self._version = 0

    def publish(self, model: Model) -> PolicySnapshot:
        subset = ParamSet()
        for path, t in model.params.items():
            if path.startswith("encoder") or path.startswith("actor"):
                c = ad.Tensor(t.data.copy(), requires_grad=False, name=path)
                subset._store[path] = c
        with self._lock:
            version = self._version + 1
            snap = PolicySnapshot(
                version=version,
                params=subset,
                config_digest=model.cfg.config_digest(),
                digest=_snapshot_digest(version, subset, model.cfg.config_digest()),
            )
            self._version = version
            self._latest = snap
        return snap

    def latest(self) -> PolicySnapshot | None:
        with self._lock:
            return self._latest


def save_snapshot(snapshot: PolicySnapshot, model_cfg: TrainConfig, path: str | Path) -> None:
    save_params(
        snapshot.params,
        path,
        extra={
            "kind": "policy_snapshot",
            "version": snapshot.version,
            "config_digest": snapshot.config_digest,
            "digest": snapshot.digest,
            "model": model_cfg.to_dict(),
        },
    )


def load_policy(path: str | Path, epsilon: float = 0.0) -> tuple[ActorPolicy, dict]:
    """Rebuild an inference-only policy from a snapshot file."""
    params, extra = load_params(path)
    if extra.get("kind") != "policy_snapshot":
        raise ConfigError(f"{path} is not a policy snapshot file")
    cfg = TrainConfig.from_dict(extra["model"])
    enc = Encoder(ParamSet(), cfg.encoder, rng=None)
    head = ActorHead(ParamSet(), cfg.effective_k, rng=None, template=cfg.actor_template)
    policy = ActorPolicy(
        params, enc, head, cfg.encoder, cfg.effective_k,
        apply_layer_norm=not cfg.ablation.no_ln, epsilon=epsilon,
    )
    return policy, extra


def snapshot_policy(snapshot: PolicySnapshot, cfg: TrainConfig, epsilon: float = 0.0) -> ActorPolicy:
    enc = Encoder(ParamSet(), cfg.encoder, rng=None)
    head = ActorHead(ParamSet(), cfg.effective_k, rng=None, template=cfg.actor_template)
    return ActorPolicy(
        snapshot.params, enc, head, cfg.encoder, cfg.effective_k,
        apply_layer_norm=not cfg.ablation.no_ln, epsilon=epsilon,
    )


# ---------------------------------------------------------------------------
# Loss assembly
# ---------------------------------------------------------------------------


@dataclass
class BatchLosses:
    total: ad.Tensor | None
    actor: ad.Tensor
    critic: ad.Tensor
    sl: ad.Tensor | None
    diagnostics: dict


def compute_labels(model: Model, batch: TransitionArrays) -> np.ndarray:
    """Constant TD labels for a batch (greedy or expectation variant)."""
    hyper = model.hyper
    bins = model.bins
    cfg = model.cfg
    r_norm = normalized_reward(
        batch.y_l, batch.y_v, batch.actions, bins, hyper.lam, hyper.videos_per_request, hyper.tau_r
    )
    detached = model.params.detached()
    next_groups = model.route_groups(batch.next_states.group_ids)
    h_next = model.encoder.encode(detached, batch.next_states, mode="critic_path").h_prime_s
    h_next_in = model.tower_input(h_next)
    min_q_next = target_q_min(
        model.critics, h_next_in, next_groups, batch.next_y_l, batch.next_y_v, model._hyper_inner
    )
    if cfg.ablation.vanilla_label:
        _, p_next = model.actor.forward(detached, h_next_in, next_groups, apply_layer_norm=False)
        return q_label_vanilla(r_norm, min_q_next, p_next.data, batch.terminal, hyper.gamma)
    return q_label(r_norm, min_q_next, batch.terminal, hyper.gamma)


def critic_and_sl_losses(model: Model, batch: TransitionArrays, labels: np.ndarray):
    bins = model.bins
    groups = model.route_groups(batch.states.group_ids)
    h = model.encoder.encode(model.params, batch.states, mode="critic_path").h_prime_s
    h_in = model.tower_input(h)
    live_idx, delta_l = bin_arrays(batch.y_l, bins, "live", actions=batch.actions)
    video_idx, delta_v = bin_arrays(batch.y_v, bins, "video")
    l_critic, outs = critic_loss(
        model.critics, model.params, h_in, groups, batch.actions, live_idx, video_idx, labels,
        model._hyper_inner,
    )
    l_sl = None
    if not model.cfg.ablation.no_sl:
        l_sl = sl_loss(
            model.critics, model.params, h_in, groups, live_idx, video_idx, delta_l, delta_v,
            model._hyper_inner, ratio_outputs=[(o.f_ratios, o.g_ratios) for o in outs],
        )
    return l_critic, l_sl, h_in


def actor_loss_for_batch(model: Model, batch: TransitionArrays, h_critic_in: ad.Tensor | None = None):
    """Actor loss for a batch; `h_critic_in` may pass along the critic-path
    tower input so the constant weight computation can reuse its values."""
    cfg = model.cfg
    groups = model.route_groups(batch.states.group_ids)
    if cfg.ablation.no_sg and h_critic_in is not None:
        h_actor_in = h_critic_in
    else:
        mode = "critic_path" if cfg.ablation.no_sg else "actor_path"
        h_actor = model.encoder.encode(model.params, batch.states, mode=mode).h_prime_s
        h_actor_in = model.tower_input(h_actor)
    _, p = model.actor.forward(model.params, h_actor_in, groups, apply_layer_norm=False)

    detached = model.params.detached()
    if h_critic_in is not None:
        h_const_in = h_critic_in.detach()
    else:
        h_const = model.encoder.encode(detached, batch.states, mode="critic_path").h_prime_s
        h_const_in = model.tower_input(h_const)
    q_min = q_min_both_actions(
        model.critics, detached, h_const_in, groups, batch.y_l, batch.y_v, model._hyper_inner
    )
    return actor_loss(p, batch.actions, q_min, normalize=not cfg.ablation.no_qnorm)


def compute_batch_losses(model: Model, batch: TransitionArrays) -> BatchLosses:
    labels = compute_labels(model, batch)
    l_critic, l_sl, h_in = critic_and_sl_losses(model, batch, labels)
    l_actor, diag = actor_loss_for_batch(model, batch, h_critic_in=h_in)
    total = ad.add(l_actor, l_critic)
    if l_sl is not None:
        total = ad.add(total, l_sl)
    return BatchLosses(total=total, actor=l_actor, critic=l_critic, sl=l_sl, diagnostics=diag)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: Model
    metrics: list[dict]
    collapsed: bool
    steps_run: int
    label_mode: str
    loss_terms: tuple[str, ...]
    final_snapshot: PolicySnapshot | None
    out_dir: Path | None


def _probe_metrics(model: Model, probe: TransitionArrays) -> tuple[float, float, float]:
    """(mean Q, max Q, greedy allocation ratio) on held-out transitions.

    Q is the clipped-min critic value at each probe transition's logged
    action, using the recorded watch-time bins.
    """
    detached = model.params.detached()
    groups = model.route_groups(probe.states.group_ids)
    h = model.encoder.encode(detached, probe.states, mode="critic_path").h_prime_s
    h_in = model.tower_input(h)
    q_min = q_min_both_actions(model.critics, detached, h_in, groups, probe.y_l, probe.y_v, model._hyper_inner)
    q_sel = q_min[np.arange(probe.n), probe.actions]
    _, p = model.actor.forward(detached, h_in, groups, apply_layer_norm=False)
    ratio = float(np.mean(np.argmax(p.data, axis=1) == 1))
    return float(q_sel.mean()), float(q_sel.max()), ratio


def _write_forensics(out_dir: Path | None, step: int, info: dict) -> None:
    if out_dir is None:
        return
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "forensics.json").write_text(json.dumps({"step": step, **info}, indent=2, default=float))


def train(
    data: LoggedDataset | TransitionArrays,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    probe: TransitionArrays | None = None,
    publisher: SnapshotPublisher | None = None,
) -> TrainResult:
    """Train on a logged dataset; deterministic given (data, cfg).

    Writes `config.json`, `metrics.csv` and a final step-named checkpoint
    under `out_dir` when given. Raises NumericFault after dumping
    forensics if any loss goes non-finite.
    """
    arrays = data if isinstance(data, TransitionArrays) else build_arrays(data, cfg.encoder)
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        (out_path / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))

    model = Model(cfg)
    publisher = publisher or SnapshotPublisher()
    adam = AdamState(lr=cfg.lr_hidden, lr_overrides={"encoder/embedding": cfg.lr_embedding})
    rng = np.random.default_rng([cfg.seed, 0x7AB1])

    if probe is None:
        probe_idx = rng.permutation(arrays.n)[: min(cfg.probe_size, arrays.n)]
        probe = arrays.take(probe_idx)
    elif probe.n > cfg.probe_size:
        probe = probe.take(np.arange(cfg.probe_size))

    n_steps = cfg.steps_for(arrays.n)
    metrics: list[dict] = []
    pinned_run, collapsed = 0, False
    start = time.monotonic()
    last_losses = {"L_actor": 0.0, "L_critic": 0.0, "L_SL": 0.0}

    for step_i in range(1, n_steps + 1):
        idx = rng.integers(arrays.n, size=min(cfg.batch_size, arrays.n))
        batch = arrays.take(idx)

        try:
            if cfg.ablation.sep_actor:
                labels = compute_labels(model, batch)
                l_critic, l_sl, _ = critic_and_sl_losses(model, batch, labels)
                critic_total = l_critic if l_sl is None else ad.add(l_critic, l_sl)
                model.params.zero_grad()
                critic_total.backward()
                clip_grad_norm(model.params, cfg.grad_clip)
                adam_step(model.params, adam)
                l_actor, diag = actor_loss_for_batch(model, batch)
                model.params.zero_grad()
                l_actor.backward()
                clip_grad_norm(model.params, cfg.grad_clip)
                adam_step(model.params, adam)
                losses = BatchLosses(None, l_actor, l_critic, l_sl, diag)
            else:
                losses = compute_batch_losses(model, batch)
                model.params.zero_grad()
                losses.total.backward()
                clip_grad_norm(model.params, cfg.grad_clip)
                adam_step(model.params, adam)
        except NumericFault:
            _write_forensics(out_path, step_i, {"losses": last_losses, "metrics_tail": metrics[-5:]})
            raise

        last_losses = {
            "L_actor": float(losses.actor.data),
            "L_critic": float(losses.critic.data),
            "L_SL": float(losses.sl.data) if losses.sl is not None else 0.0,
        }
        if not all(np.isfinite(v) for v in last_losses.values()):
            _write_forensics(out_path, step_i, {"losses": last_losses, "metrics_tail": metrics[-5:]})
            raise NumericFault(f"non-finite loss at step {step_i}: {last_losses}")

        if cfg.sync_mode == "hard":
            if step_i % cfg.sync_period == 0:
                model.critics.sync_targets("hard")
        else:
            model.critics.sync_targets("polyak", cfg.polyak_tau)

        if step_i % cfg.publish_every == 0 or step_i == n_steps:
            publisher.publish(model)

        if step_i > cfg.metrics_start and (step_i % cfg.eval_every == 0 or step_i == n_steps):
            mean_q, max_q, alloc = _probe_metrics(model, probe)
            if not np.isfinite(mean_q):
                _write_forensics(out_path, step_i, {"losses": last_losses, "mean_Q": mean_q})
                raise NumericFault(f"non-finite probe Q at step {step_i}")
            row = {
                "step": step_i,
                **last_losses,
                "mean_Q": mean_q,
                "max_Q": max_q,
                "alloc_ratio": alloc,
                "wall_ms": int((time.monotonic() - start) * 1000),
            }
            metrics.append(row)
            pinned_run = pinned_run + 1 if alloc in (0.0, 1.0) else 0
            if pinned_run >= COLLAPSE_WINDOW:
                collapsed = True

    snapshot = publisher.publish(model)
    if out_path is not None:
        with open(out_path / "metrics.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=METRICS_HEADER)
            writer.writeheader()
            writer.writerows(metrics)
        save_params(model.params, out_path / f"checkpoint_{n_steps:06d}.json", extra={"step": n_steps})
        save_snapshot(snapshot, cfg, out_path / "snapshot.json")

    loss_terms = ("L_actor", "L_critic") + (() if cfg.ablation.no_sl else ("L_SL",))
    return TrainResult(
        model=model,
        metrics=metrics,
        collapsed=collapsed,
        steps_run=n_steps,
        label_mode="vanilla" if cfg.ablation.vanilla_label else "greedy",
        loss_terms=loss_terms,
        final_snapshot=snapshot,
        out_dir=out_path,
    )


def train_streaming(
    sim_cfg: feedsim.SimConfig,
    cfg: TrainConfig,
    num_sessions: int,
    max_steps_per_session: int = 100,
    buffer_cap: int = 50_000,
    out_dir: str | Path | None = None,
    publisher: SnapshotPublisher | None = None,
) -> TrainResult:
    """Single-pass streaming mode: collect sessions with the latest
    published snapshot (epsilon-greedy) and train on a sliding buffer.

    One optimizer step per collected session once the buffer holds a full
    batch. Deterministic given (sim_cfg, cfg, num_sessions).
    """
    model = Model(cfg)
    publisher = publisher or SnapshotPublisher()
    publisher.publish(model)
    adam = AdamState(lr=cfg.lr_hidden, lr_overrides={"encoder/embedding": cfg.lr_embedding})
    rng = np.random.default_rng([cfg.seed, 0x57E4])
    population = feedsim.build_population(sim_cfg, max(64, min(num_sessions, 512)), seed=cfg.seed)

    buffer: list[dict] = []
    metrics: list[dict] = []
    start = time.monotonic()
    steps_run = 0
    for session_i in range(num_sessions):
        snap = publisher.latest()
        behave = snapshot_policy(snap, cfg, epsilon=cfg.epsilon)
        user = copy.deepcopy(population[session_i % len(population)])
        records = feedsim.run_session(user, behave, sim_cfg, np.random.default_rng([cfg.seed, 0x5E55, session_i]), max_steps_per_session)
        buffer.extend(feedsim._session_transitions(session_i, records))
        if len(buffer) > buffer_cap:
            del buffer[: len(buffer) - buffer_cap]
        if len(buffer) < cfg.batch_size:
            continue

        pick = rng.integers(len(buffer), size=cfg.batch_size)
        batch = build_arrays(LoggedDataset({"record": "header"}, [buffer[i] for i in pick]), cfg.encoder)
        losses = compute_batch_losses(model, batch)
        model.params.zero_grad()
        losses.total.backward()
        clip_grad_norm(model.params, cfg.grad_clip)
        adam_step(model.params, adam)
        steps_run += 1

        if cfg.sync_mode == "hard":
            if steps_run % cfg.sync_period == 0:
                model.critics.sync_targets("hard")
        else:
            model.critics.sync_targets("polyak", cfg.polyak_tau)
        if steps_run % cfg.publish_every == 0:
            publisher.publish(model)
        if steps_run % cfg.eval_every == 0:
            metrics.append(
                {
                    "step": steps_run,
                    "L_actor": float(losses.actor.data),
                    "L_critic": float(losses.critic.data),
                    "L_SL": float(losses.sl.data) if losses.sl is not None else 0.0,
                    "mean_Q": float("nan"),
                    "max_Q": float("nan"),
                    "alloc_ratio": float("nan"),
                    "wall_ms": int((time.monotonic() - start) * 1000),
                }
            )

    snapshot = publisher.publish(model)
    return TrainResult(
        model=model,
        metrics=metrics,
        collapsed=False,
        steps_run=steps_run,
        label_mode="vanilla" if cfg.ablation.vanilla_label else "greedy",
        loss_terms=("L_actor", "L_critic") + (() if cfg.ablation.no_sl else ("L_SL",)),
        final_snapshot=snapshot,
        out_dir=Path(out_dir) if out_dir else None,
    )


# ---------------------------------------------------------------------------
# Variant suite
# ---------------------------------------------------------------------------


def run_variant_suite(
    base_cfg: TrainConfig,
    variant_names: list[str],
    seeds: list[int],
    train_ds: LoggedDataset,
    eval_ds: LoggedDataset,
    cap: float = 10.0,
    out_dir: str | Path | None = None,
) -> dict:
    """Train each named variant on identical data and seeds; evaluate each
    trained policy with the importance-sampling estimator on held-out
    trajectories. Returns per-run rows plus per-variant aggregates."""
    from .ope import ncis

    train_arrays = build_arrays(train_ds, base_cfg.encoder)
    eval_arrays = build_arrays(eval_ds, base_cfg.encoder)
    rows = []
    for name in variant_names:
        if name not in VARIANTS:
            raise ConfigError(f"unknown variant {name!r}; known: {sorted(VARIANTS)}")
        for seed in seeds:
            cfg = dataclasses.replace(
                base_cfg, seed=seed, ablation=AblationFlags.from_names(VARIANTS[name])
            )
            result = train(train_arrays, cfg)
            report = ncis(eval_arrays, result.model.policy(), cap=cap, gamma=cfg.gamma)
            rows.append(
                {
                    "variant": name,
                    "seed": seed,
                    "ncis_cumulative": report.cumulative_estimate,
                    "ncis_ratio": report.ratio_estimate,
                    "collapsed": result.collapsed,
                    "label_mode": result.label_mode,
                }
            )
    aggregates = []
    for name in variant_names:
        vals = np.array([r["ncis_cumulative"] for r in rows if r["variant"] == name])
        aggregates.append(
            {"variant": name, "mean": float(vals.mean()), "std": float(vals.std()), "n": int(len(vals))}
        )
    table = {"rows": rows, "aggregates": aggregates}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "suite.json").write_text(json.dumps(table, indent=2))
    return table
