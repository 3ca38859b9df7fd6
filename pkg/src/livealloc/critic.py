"""Supervised-learning-enhanced critic.

Each of the two critics decomposes as Q(s, a) = R(s, a) + gamma * T(s, a):
a reward-prediction part built from discretized watch-time bins, and a
per-action residual head. Watch times are binned into fixed intervals;
two sigmoid towers predict the within-bin ratio for the live and video
medium, a linear reconstruction recovers seconds from (bin, ratio), and
the normalized reward is a squashed difference of the reconstructed live
seconds and scaled video seconds. TD labels are built from ground-truth
bins plus the clipped (elementwise-min) pair of target critics and are
constants to backprop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .errors import ContractError
from .mgsd import RATIO_TEMPLATE, RESIDUAL_TEMPLATE, MultiGroupNet

DEFAULT_LIVE_BOUNDS = (0.0, 6.0, 15.0, 30.0, 60.0, 100.0, 600.0, 1200.0)
DEFAULT_VIDEO_BOUNDS = (0.0, 3.0, 10.0, 25.0, 50.0, 100.0, 600.0, 1200.0)


# ---------------------------------------------------------------------------
# Watch-time discretization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeBinSpec:
    """Fixed watch-time intervals plus one reserved no-injection bin.

    Intervals are right-open except the last, which is right-closed at the
    outer boundary. The reserved bin sits at the last index with zero
    boundaries, so it reconstructs to 0 seconds; it represents the a = 0
    case for the live medium (the video medium keeps the slot only for
    shape symmetry). Boundary values fall into the higher interval with
    ratio 0.
    """

    live_bounds: tuple[float, ...] = DEFAULT_LIVE_BOUNDS
    video_bounds: tuple[float, ...] = DEFAULT_VIDEO_BOUNDS

    def __post_init__(self):
        for bounds in (self.live_bounds, self.video_bounds):
            if len(bounds) < 2 or any(b >= c for b, c in zip(bounds, bounds[1:])):
                raise ContractError(f"bin boundaries must be strictly increasing, got {bounds}")
        if len(self.live_bounds) != len(self.video_bounds):
            raise ContractError("live and video boundary vectors must share a length")

    @classmethod
    def degenerate(cls, outer: float = 1200.0) -> "TimeBinSpec":
        """Single interval [0, outer]: ratio learning becomes y/outer regression."""
        return cls(live_bounds=(0.0, outer), video_bounds=(0.0, outer))

    @property
    def n_intervals(self) -> int:
        return len(self.live_bounds) - 1

    @property
    def n_bins(self) -> int:
        return self.n_intervals + 1

    @property
    def reserved_index(self) -> int:
        return self.n_intervals

    def starts(self, medium: str) -> np.ndarray:
        bounds = self.live_bounds if medium == "live" else self.video_bounds
        return np.array(list(bounds[:-1]) + [0.0])

    def ends(self, medium: str) -> np.ndarray:
        bounds = self.live_bounds if medium == "live" else self.video_bounds
        return np.array(list(bounds[1:]) + [0.0])


def bin_arrays(
    y: np.ndarray,
    spec: TimeBinSpec,
    medium: str,
    actions: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized (bin index, within-bin ratio) for watch times in [0, 1200].

    For the live medium, rows with action 0 land in the reserved bin with
    ratio 0 regardless of y (which is necessarily 0 there).
    """
    y = np.asarray(y, dtype=np.float64)
    bounds = np.array(spec.live_bounds if medium == "live" else spec.video_bounds)
    if np.any(y < bounds[0]) or np.any(y > bounds[-1]):
        raise ContractError(f"watch time outside [{bounds[0]}, {bounds[-1]}]; clipping happens upstream")
    idx = np.searchsorted(bounds, y, side="right") - 1
    idx = np.minimum(idx, len(bounds) - 2)  # outer boundary joins the last interval
    starts, ends = spec.starts(medium), spec.ends(medium)
    delta = (y - starts[idx]) / (ends[idx] - starts[idx])
    if medium == "live" and actions is not None:
        a0 = np.asarray(actions) == 0
        idx = np.where(a0, spec.reserved_index, idx)
        delta = np.where(a0, 0.0, delta)
    return idx.astype(np.int64), delta


def bin_of(y: float, medium: str, action: int, spec: TimeBinSpec) -> tuple[np.ndarray, float]:
    """One-hot bin vector and within-bin ratio for a single watch time."""
    idx, delta = bin_arrays(
        np.array([y]), spec, medium, actions=np.array([action]) if medium == "live" else None
    )
    onehot = np.zeros(spec.n_bins)
    onehot[idx[0]] = 1.0
    return onehot, float(delta[0])


def reconstruct(onehot: np.ndarray, delta: float, y_start: np.ndarray, y_end: np.ndarray) -> float:
    """Linear reconstruction: o . (y_start + delta * (y_end - y_start))."""
    onehot = np.asarray(onehot, dtype=np.float64)
    return float(onehot @ (y_start + delta * (y_end - y_start)))


def normalized_reward(
    y_l: np.ndarray,
    y_v: np.ndarray,
    actions: np.ndarray,
    spec: TimeBinSpec,
    lam: float,
    b: int,
    tau_r: float,
) -> np.ndarray:
    """Sigmoid-squashed per-step reward from ground-truth bins and ratios.

    Reconstructing the true (bin, ratio) pairs recovers the raw watch
    times exactly, so this equals sigmoid((y_l - (lam/b) y_v) / tau_r);
    going through the reconstruction keeps it consistent with the critic's
    reward head by construction.
    """
    li, ld = bin_arrays(y_l, spec, "live", actions=actions)
    vi, vd = bin_arrays(y_v, spec, "video")
    ls, le = spec.starts("live"), spec.ends("live")
    vs, ve = spec.starts("video"), spec.ends("video")
    f_true = ls[li] + ld * (le[li] - ls[li])
    g_true = vs[vi] + vd * (ve[vi] - vs[vi])
    from .autodiff import _expit

    return _expit((f_true - (lam / b) * g_true) / tau_r)


# ---------------------------------------------------------------------------
# Critic networks
# ---------------------------------------------------------------------------


@dataclass
class CriticHyper:
    gamma: float = 0.9
    lam: float = 1.0
    videos_per_request: int = 6
    tau_r: float = 100.0  # reward temperature inside the squashing sigmoid
    huber_delta: float = 1.0
    apply_layer_norm: bool = True


@dataclass
class CriticOutput:
    q: Tensor  # (n,) selected-action value
    r: Tensor  # (n,) normalized reward prediction, in (0, 1)
    t: Tensor  # (n, 2) residual head output
    f_ratios: Tensor  # (n, n_bins) live within-bin ratio predictions
    g_ratios: Tensor  # (n, n_bins) video within-bin ratio predictions


class CriticNet:
    """One critic: two sigmoid ratio towers plus one residual tower."""

    def __init__(
        self,
        params: nn.ParamSet,
        prefix: str,
        k: int,
        bins: TimeBinSpec,
        rng=None,
        ratio_template=RATIO_TEMPLATE,
        residual_template=RESIDUAL_TEMPLATE,
    ):
        self.prefix = prefix
        self.bins = bins
        ratio_t = tuple(ratio_template[:-1]) + (bins.n_bins,)
        self.f_gamma = MultiGroupNet(params, f"{prefix}/ratio_live", k, ratio_t, rng, out_activation="sigmoid")
        self.g_theta = MultiGroupNet(params, f"{prefix}/ratio_video", k, ratio_t, rng, out_activation="sigmoid")
        self.qrn = MultiGroupNet(params, f"{prefix}/residual", k, residual_template, rng)

    def towers(self, ps, h: Tensor, groups: np.ndarray, hyper: CriticHyper) -> tuple[Tensor, Tensor, Tensor]:
        """One routed forward through each tower: (live ratios, video ratios,
        per-action residuals). Reusable across action branches."""
        f = self.f_gamma.route(ps, h, groups, hyper.apply_layer_norm)
        g = self.g_theta.route(ps, h, groups, hyper.apply_layer_norm)
        t = self.qrn.route(ps, h, groups, hyper.apply_layer_norm)
        return f, g, t

    def reward_from_ratios(
        self,
        f: Tensor,
        g: Tensor,
        live_idx: np.ndarray,
        video_idx: np.ndarray,
        hyper: CriticHyper,
    ) -> Tensor:
        """Normalized reward from tower ratio outputs at the observed bins.

        Reconstructs live and (penalty-scaled) video seconds via the
        linear reconstruction and squashes their gap through a sigmoid
        with temperature `tau_r`.
        """
        if live_idx is None or video_idx is None:
            raise ContractError("reward prediction needs the observed live and video bin of each sample")
        ls, le = self.bins.starts("live"), self.bins.ends("live")
        vs, ve = self.bins.starts("video"), self.bins.ends("video")
        f_sel = nn.select_columns(f, live_idx)
        g_sel = nn.select_columns(g, video_idx)
        f_rec = ad.add(ad.mul(f_sel, (le - ls)[live_idx]), ls[live_idx])
        g_rec = ad.add(ad.mul(g_sel, (ve - vs)[video_idx]), vs[video_idx])
        scaled_gap = ad.mul(ad.add(f_rec, ad.mul(g_rec, -hyper.lam / hyper.videos_per_request)), 1.0 / hyper.tau_r)
        return ad.sigmoid(scaled_gap)

    def rpn_forward(
        self,
        ps,
        h: Tensor,
        groups: np.ndarray,
        live_idx: np.ndarray,
        video_idx: np.ndarray,
        hyper: CriticHyper,
    ) -> tuple[Tensor, Tensor, Tensor]:
        """Normalized reward prediction from the sample's observed bins;
        returns (R, live ratio vector, video ratio vector)."""
        f = self.f_gamma.route(ps, h, groups, hyper.apply_layer_norm)
        g = self.g_theta.route(ps, h, groups, hyper.apply_layer_norm)
        return self.reward_from_ratios(f, g, live_idx, video_idx, hyper), f, g

    def q_forward(
        self,
        ps,
        h: Tensor,
        groups: np.ndarray,
        actions: np.ndarray,
        live_idx: np.ndarray,
        video_idx: np.ndarray,
        hyper: CriticHyper,
    ) -> CriticOutput:
        f, g, t = self.towers(ps, h, groups, hyper)
        r = self.reward_from_ratios(f, g, live_idx, video_idx, hyper)
        t_a = nn.select_columns(t, np.asarray(actions, dtype=np.int64))
        q = ad.add(r, ad.mul(t_a, hyper.gamma))
        return CriticOutput(q=q, r=r, t=t, f_ratios=f, g_ratios=g)


class CriticPair:
    """Two current critics plus frozen target copies of their parameters.

    Targets mirror only the critic towers (the shared encoder has no
    target copy); they change exclusively through `sync_targets`.
    """

    def __init__(self, params: nn.ParamSet, k: int, bins: TimeBinSpec, rng=None,
                 ratio_template=RATIO_TEMPLATE, residual_template=RESIDUAL_TEMPLATE):
        self.params = params
        self.nets = [
            CriticNet(params, f"critic{i}", k, bins, rng, ratio_template, residual_template)
            for i in (1, 2)
        ]
        self.target_params = self._critic_subset(params)

    def _critic_subset(self, params: nn.ParamSet) -> nn.ParamSet:
        out = nn.ParamSet()
        for path, t in params.items():
            if path.startswith("critic"):
                c = ad.Tensor(t.data.copy(), requires_grad=False, name=path)
                c.grad = np.zeros_like(c.data)
                out._store[path] = c
        return out

    def sync_targets(self, mode: str = "hard", tau: float = 1.0) -> None:
        """hard: copy current into target; polyak: target <- tau*current + (1-tau)*target."""
        for path, tgt in self.target_params.items():
            src = self.params[path].data
            if mode == "hard":
                tgt.data[...] = src
            elif mode == "polyak":
                tgt.data *= 1.0 - tau
                tgt.data += tau * src
            else:
                raise ContractError(f"unknown sync mode {mode!r}")


# ---------------------------------------------------------------------------
# Labels and losses
# ---------------------------------------------------------------------------


def q_min_both_actions(
    pair: CriticPair,
    ps,
    h_const: Tensor,
    groups: np.ndarray,
    y_l: np.ndarray,
    y_v: np.ndarray,
    hyper: CriticHyper,
) -> np.ndarray:
    """Elementwise min over the two critics of Q(s, a) for both actions.

    `ps` picks the parameter view: the pair's target set for TD labels, a
    detached view of the current set for actor-loss weights. The bin
    one-hots come from the recorded watch times: the a = 0 branch uses the
    reserved live bin, the a = 1 branch bins the recorded live watch time.
    Returns an (n, 2) constant array (no graph is built).
    """
    n = h_const.shape[0]
    bins = pair.nets[0].bins
    vi, _ = bin_arrays(y_v, bins, "video")
    q_per_critic = np.empty((2, n, 2))
    for ci, net in enumerate(pair.nets):
        f, g, t = net.towers(ps, h_const, groups, hyper)
        for a in (0, 1):
            acts = np.full(n, a, dtype=np.int64)
            li, _ = bin_arrays(y_l, bins, "live", actions=acts)
            r = net.reward_from_ratios(f, g, li, vi, hyper)
            q_per_critic[ci, :, a] = r.data + hyper.gamma * t.data[:, a]
    return np.minimum(q_per_critic[0], q_per_critic[1])


def target_q_min(
    pair: CriticPair,
    h_next_const: Tensor,
    groups: np.ndarray,
    next_y_l: np.ndarray,
    next_y_v: np.ndarray,
    hyper: CriticHyper,
) -> np.ndarray:
    """min over the two *target* critics of Q'(s', a') for both next actions."""
    return q_min_both_actions(pair, pair.target_params, h_next_const, groups, next_y_l, next_y_v, hyper)


def q_label(r_norm: np.ndarray, min_target_q: np.ndarray, terminal: np.ndarray, gamma: float) -> np.ndarray:
    """Greedy bootstrapped label: r + gamma * max_a' minQ'(s', a'); terminal rows keep r."""
    cont = np.where(np.asarray(terminal), 0.0, np.max(min_target_q, axis=1))
    return np.asarray(r_norm) + gamma * cont


def q_label_vanilla(
    r_norm: np.ndarray,
    min_target_q: np.ndarray,
    next_action_probs: np.ndarray,
    terminal: np.ndarray,
    gamma: float,
) -> np.ndarray:
    """Expectation label: r + gamma * sum_a' p(s', a') minQ'(s', a')."""
    expected = np.sum(np.asarray(next_action_probs) * min_target_q, axis=1)
    cont = np.where(np.asarray(terminal), 0.0, expected)
    return np.asarray(r_norm) + gamma * cont


def critic_loss(
    pair: CriticPair,
    ps,
    h: Tensor,
    groups: np.ndarray,
    actions: np.ndarray,
    live_idx: np.ndarray,
    video_idx: np.ndarray,
    labels: np.ndarray,
    hyper: CriticHyper,
) -> tuple[Tensor, list[CriticOutput]]:
    """Sum over both critics of the mean Huber TD error against constant labels."""
    outs = [net.q_forward(ps, h, groups, actions, live_idx, video_idx, hyper) for net in pair.nets]
    loss = None
    for out in outs:
        term = ad.tmean(nn.huber(out.q, labels, hyper.huber_delta))
        loss = term if loss is None else ad.add(loss, term)
    return loss, outs


def sl_loss(
    pair: CriticPair,
    ps,
    h: Tensor,
    groups: np.ndarray,
    live_idx: np.ndarray,
    video_idx: np.ndarray,
    delta_l: np.ndarray,
    delta_v: np.ndarray,
    hyper: CriticHyper,
    ratio_outputs: list[tuple[Tensor, Tensor]] | None = None,
) -> Tensor:
    """Supervised ratio loss: Huber between each critic's predicted within-bin
    ratios (at the observed bins only) and the true ratios.

    `ratio_outputs` can carry (live, video) ratio tensors already produced
    by a critic forward on the same batch, avoiding a second routed pass.
    """
    loss = None
    for i, net in enumerate(pair.nets):
        if ratio_outputs is not None:
            f, g = ratio_outputs[i]
        else:
            f = net.f_gamma.route(ps, h, groups, hyper.apply_layer_norm)
            g = net.g_theta.route(ps, h, groups, hyper.apply_layer_norm)
        term = ad.add(
            ad.tmean(nn.huber(nn.select_columns(f, live_idx), delta_l, hyper.huber_delta)),
            ad.tmean(nn.huber(nn.select_columns(g, video_idx), delta_v, hyper.huber_delta)),
        )
        loss = term if loss is None else ad.add(loss, term)
    return loss
