"""Multi-group state decomposition: hard routing of the latent state
through one of K group-specific MLP heads.

All heads share a layer-width template but own independent parameters.
They are stored stacked, one (K, in, out) weight tensor and one (K, out)
bias tensor per layer, with head g occupying slice [g]; routing touches
exactly the slices of the groups present in a batch, so training on one
group's samples leaves every other head's parameters (and gradients)
identically zero. The head input is layer-normalized (skippable for the
no-normalization ablation). K = 1 degenerates to a plain MLP.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .errors import ConfigError, RoutingError

# default layer-width templates, latent input first, output width last
ACTOR_TEMPLATE = (128, 63, 31, 2)
RATIO_TEMPLATE = (128, 64, 32, 8)
RESIDUAL_TEMPLATE = (128, 64, 32, 2)


def head_output_dims(
    actor_template=ACTOR_TEMPLATE,
    ratio_template=RATIO_TEMPLATE,
    residual_template=RESIDUAL_TEMPLATE,
) -> dict[str, int]:
    """Final widths of the three tower kinds: action logits, per-bin watch
    ratios, and per-action Q residuals."""
    return {
        "actor": actor_template[-1],
        "rpn": ratio_template[-1],
        "qrn": residual_template[-1],
    }


class MultiGroupNet:
    """K independent MLP heads over a shared template, routed by group id."""

    def __init__(
        self,
        params: nn.ParamSet,
        prefix: str,
        k: int,
        template,
        rng=None,
        out_activation: str = "identity",
    ):
        if len(template) < 2:
            raise ConfigError(f"head template needs at least [in, out], got {template}")
        self.prefix = prefix
        self.k = int(k)
        self.template = tuple(template)
        self.out_activation = out_activation
        self.n_layers = len(self.template) - 1
        if rng is not None:
            for i, (fan_in, fan_out) in enumerate(zip(self.template[:-1], self.template[1:])):
                params.add(
                    f"{prefix}/l{i}/w",
                    nn.glorot_uniform(rng, fan_in, fan_out, (self.k, fan_in, fan_out)),
                )
                params.add(f"{prefix}/l{i}/b", np.zeros((self.k, fan_out)))

    @property
    def out_dim(self) -> int:
        return self.template[-1]

    def layer_paths(self, layer: int) -> tuple[str, str]:
        return f"{self.prefix}/l{layer}/w", f"{self.prefix}/l{layer}/b"

    def head_values(self, ps, group: int) -> dict[str, np.ndarray]:
        """Copies of one head's parameter slices, keyed by layer path."""
        out = {}
        for i in range(self.n_layers):
            wp, bp = self.layer_paths(i)
            out[wp] = ps[wp].data[group].copy()
            out[bp] = ps[bp].data[group].copy()
        return out

    def head_grad_norm(self, ps, group: int) -> float:
        total = 0.0
        for i in range(self.n_layers):
            for path in self.layer_paths(i):
                g = ps[path].grad
                if g is not None:
                    total += float(np.sum(g[group] * g[group]))
        return float(np.sqrt(total))

    def route(self, ps, x: Tensor, group_ids: np.ndarray, apply_layer_norm: bool = True) -> Tensor:
        """heads[g](layer_norm(x)) per row; backward touches only routed heads."""
        groups = np.asarray(group_ids, dtype=np.int64)
        if groups.size and (groups.min() < 0 or groups.max() >= self.k):
            bad = groups[(groups < 0) | (groups >= self.k)][0]
            raise RoutingError(f"group id {bad} outside [0, {self.k})")
        if apply_layer_norm:
            x = nn.layer_norm(x)
        if self.k == 1:
            groups = np.zeros(x.shape[0], dtype=np.int64)
        for i in range(self.n_layers):
            wp, bp = self.layer_paths(i)
            x = ad.grouped_linear(x, ps[wp], ps[bp], groups)
            if i < self.n_layers - 1:
                x = ad.relu(x)
            elif self.out_activation == "relu":
                x = ad.relu(x)
            elif self.out_activation == "sigmoid":
                x = ad.sigmoid(x)
            elif self.out_activation != "identity":
                raise ConfigError(f"unknown activation {self.out_activation!r}")
        return x
