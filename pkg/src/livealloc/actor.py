"""Policy network, its distillation-style loss, and action selection.

The actor is a grouped head over the (stop-gradient) latent state. Its
loss is a cross entropy weighted per sample by the clipped-min critic
value at the logged action, normalized with a softmax across the two
actions so the weight stays in (0, 1) no matter how large the critic
values get. The weight is always a constant to backprop: the actor loss
never updates critic parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .encoder import Encoder, EncoderConfig, StateBatch, batch_from_states
from .mgsd import ACTOR_TEMPLATE, MultiGroupNet

LOG_CLAMP = 1e-12


@dataclass
class PolicyOutput:
    logits: np.ndarray  # (2,)
    p: np.ndarray  # (2,), sums to 1
    chosen_action: int | None = None
    propensity: float | None = None


class ActorHead:
    def __init__(self, params: nn.ParamSet, k: int, rng=None, template=ACTOR_TEMPLATE, prefix: str = "actor"):
        self.net = MultiGroupNet(params, prefix, k, template, rng)

    def forward(self, ps, h: Tensor, groups: np.ndarray, apply_layer_norm: bool = True) -> tuple[Tensor, Tensor]:
        """Action logits and probabilities for a batch of latent states."""
        logits = self.net.route(ps, h, groups, apply_layer_norm)
        return logits, nn.softmax(logits, axis=-1)


def actor_loss(
    p: Tensor,
    actions: np.ndarray,
    q_min: np.ndarray,
    normalize: bool = True,
) -> tuple[Tensor, dict]:
    """Mean of -w * log p(s, a_logged) over the batch.

    `q_min` is the (n, 2) elementwise-min critic value array, already
    detached from any graph. With `normalize` the weight is the softmax of
    q_min across actions evaluated at the logged action; without it the
    raw value is used. Probabilities are clamped at 1e-12 before the log;
    clamp events are counted in the returned diagnostics.
    """
    actions = np.asarray(actions, dtype=np.int64)
    q_min = np.asarray(q_min, dtype=np.float64)
    if normalize:
        shifted = q_min - q_min.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        weights_all = e / e.sum(axis=1, keepdims=True)
    else:
        weights_all = q_min
    w = weights_all[np.arange(len(actions)), actions]

    p_a = nn.select_columns(p, actions)
    n_clamped = int(np.sum(p_a.data < LOG_CLAMP))
    loss = ad.tmean(ad.mul(ad.log(ad.clip_min(p_a, LOG_CLAMP)), -w))
    return loss, {"clamped": n_clamped, "mean_weight": float(w.mean())}


def select_action(p: np.ndarray, epsilon: float, rng: np.random.Generator) -> tuple[int, float]:
    """Epsilon-greedy pick over two actions with its exact propensity.

    With probability epsilon the action is uniform over {0, 1}, otherwise
    the argmax of p; the returned propensity is
    epsilon/2 + (1 - epsilon) * [action == argmax].
    """
    p = np.asarray(p, dtype=np.float64)
    greedy = int(np.argmax(p))
    if rng.random() < epsilon:
        action = int(rng.integers(2))
    else:
        action = greedy
    propensity = epsilon / 2.0 + (1.0 - epsilon) * (1.0 if action == greedy else 0.0)
    return action, propensity


class ActorPolicy:
    """Inference-only policy over a parameter set (live or snapshot copy).

    Implements the simulator's Policy interface plus batched probability
    evaluation for the off-policy evaluator. Group ids outside the actor's
    [0, K) range fall back to group 0.
    """

    def __init__(
        self,
        params,
        enc: Encoder,
        head: ActorHead,
        enc_cfg: EncoderConfig,
        k: int,
        apply_layer_norm: bool = True,
        epsilon: float = 0.0,
    ):
        self.params = params.detached() if hasattr(params, "detached") else params
        self.enc = enc
        self.head = head
        self.enc_cfg = enc_cfg
        self.k = k
        self.apply_layer_norm = apply_layer_norm
        self.epsilon = epsilon

    def _clip_groups(self, groups: np.ndarray) -> np.ndarray:
        return np.where(groups < self.k, groups, 0)

    def probs_batch(self, batch: StateBatch) -> np.ndarray:
        encoded = self.enc.encode(self.params, batch, mode="actor_path")
        _, p = self.head.forward(self.params, encoded.h_prime_s, self._clip_groups(batch.group_ids), self.apply_layer_norm)
        return p.data

    def policy_output(self, state: dict) -> PolicyOutput:
        batch = batch_from_states([state], self.enc_cfg)
        encoded = self.enc.encode(self.params, batch, mode="actor_path")
        logits, p = self.head.forward(self.params, encoded.h_prime_s, self._clip_groups(batch.group_ids), self.apply_layer_norm)
        return PolicyOutput(logits=logits.data[0], p=p.data[0])

    # simulator Policy interface -------------------------------------------

    def probs(self, state: dict) -> tuple[float, float]:
        p = self.policy_output(state).p
        if self.epsilon > 0.0:
            greedy = int(np.argmax(p))
            p1 = self.epsilon / 2.0 + (1.0 - self.epsilon) * (1.0 if greedy == 1 else 0.0)
            return (1.0 - p1, p1)
        return (float(p[0]), float(p[1]))

    def act(self, state: dict, rng: np.random.Generator) -> tuple[int, float]:
        out = self.policy_output(state)
        if self.epsilon > 0.0:
            return select_action(out.p, self.epsilon, rng)
        action = 1 if rng.random() < out.p[1] else 0
        return action, float(out.p[action])
