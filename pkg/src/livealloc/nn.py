"""Network building blocks on top of the autodiff core.

Everything here is float64. Parameters live in a `ParamSet` keyed by
slash-separated paths; modules hold paths, not arrays, and fetch their
tensors from whichever ParamSet (current or a frozen target copy) is
passed to the forward call.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, NumericFault

LAYER_NORM_EPS = 1e-15  # inside the sqrt; keeps unit output variance down to input variance ~1e-8
GRAD_CHECK_STEP = 1e-5

Array = np.ndarray


# ---------------------------------------------------------------------------
# Parameter storage
# ---------------------------------------------------------------------------


class ParamSet:
    """Ordered map from parameter path to a trainable Tensor.

    Every parameter carries a same-shaped gradient accumulator. A frozen
    copy (`copy(trainable=False)`) shares nothing with the original and
    builds no graph when used in forward passes.
    """

    def __init__(self) -> None:
        self._store: dict[str, Tensor] = {}
        self._flat_data: Array | None = None
        self._flat_grad: Array | None = None
        self._layout: list[tuple[str, int, int]] | None = None

    def add(self, path: str, values: Array) -> Tensor:
        if path in self._store:
            raise ConfigError(f"duplicate parameter path {path!r}")
        if self._flat_data is not None:
            raise ConfigError("cannot add parameters after freeze_layout()")
        t = Tensor(np.array(values, dtype=np.float64), requires_grad=True, name=path)
        self._store[path] = t
        return t

    def freeze_layout(self) -> None:
        """Repack all parameters/gradients as views into two flat buffers.

        Values are unchanged; afterwards zero_grad and optimizer steps
        operate on single contiguous arrays. No further `add` is allowed.
        """
        if self._flat_data is not None:
            return
        total = sum(t.data.size for t in self._store.values())
        data = np.empty(total)
        grad = np.zeros(total)
        layout: list[tuple[str, int, int]] = []
        offset = 0
        for path, t in self._store.items():
            n = t.data.size
            data[offset : offset + n] = t.data.ravel()
            t.data = data[offset : offset + n].reshape(t.data.shape)
            t.grad = grad[offset : offset + n].reshape(t.data.shape)
            layout.append((path, offset, n))
            offset += n
        self._flat_data = data
        self._flat_grad = grad
        self._layout = layout

    def __getitem__(self, path: str) -> Tensor:
        return self._store[path]

    def __contains__(self, path: str) -> bool:
        return path in self._store

    def __len__(self) -> int:
        return len(self._store)

    def paths(self) -> list[str]:
        return list(self._store)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._store.items()

    def zero_grad(self) -> None:
        if self._flat_grad is not None:
            self._flat_grad.fill(0.0)
            return
        for t in self._store.values():
            t.zero_grad()

    def copy(self, trainable: bool = True) -> "ParamSet":
        out = ParamSet()
        for path, t in self._store.items():
            c = Tensor(t.data.copy(), requires_grad=trainable, name=path)
            if not trainable:
                c.grad = np.zeros_like(c.data)  # accumulator exists, provably stays zero
            out._store[path] = c
        return out

    def load_values(self, other: "ParamSet") -> None:
        """Overwrite this set's values with `other`'s (shapes must match)."""
        for path, t in self._store.items():
            src = other[path]
            if src.data.shape != t.data.shape:
                raise DimensionError(f"{path}: cannot load shape {src.data.shape} into {t.data.shape}")
            t.data[...] = src.data

    def grad_norm(self, prefix: str = "") -> float:
        total = 0.0
        for path, t in self._store.items():
            if path.startswith(prefix) and t.grad is not None:
                total += float(np.sum(t.grad * t.grad))
        return float(np.sqrt(total))

    def detached(self) -> "_DetachedView":
        """Read-only view yielding constant tensors that share this set's data."""
        return _DetachedView(self)


class _DetachedView:
    def __init__(self, ps: ParamSet):
        self._ps = ps
        self._cache: dict[str, Tensor] = {}

    def __getitem__(self, path: str) -> Tensor:
        t = self._cache.get(path)
        if t is None:
            t = self._ps[path].detach()
            self._cache[path] = t
        return t

    def __contains__(self, path: str) -> bool:
        return path in self._ps

    def detached(self) -> "_DetachedView":
        return self


def save_params(params: ParamSet, path: str | Path, extra: Mapping | None = None) -> None:
    """Serialize to a versioned JSON file; float64 payloads are bit-exact."""
    records = []
    for p in sorted(params.paths()):
        t = params[p]
        records.append(
            {
                "path": p,
                "shape": list(t.data.shape),
                "data": base64.b64encode(np.ascontiguousarray(t.data, dtype="<f8").tobytes()).decode("ascii"),
            }
        )
    doc = {"format_version": 1, "extra": dict(extra or {}), "params": records}
    Path(path).write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")


def load_params(path: str | Path) -> tuple[ParamSet, dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format_version") != 1:
        raise ConfigError(f"unsupported parameter file version {doc.get('format_version')!r}")
    ps = ParamSet()
    for rec in doc["params"]:
        raw = np.frombuffer(base64.b64decode(rec["data"]), dtype="<f8")
        ps.add(rec["path"], raw.reshape(rec["shape"]).astype(np.float64))
    return ps, doc.get("extra", {})


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape: tuple[int, ...]) -> Array:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# Core ops
# ---------------------------------------------------------------------------


def dense_forward(x: Tensor, w: Tensor, b: Tensor, activation: str = "identity") -> Tensor:
    """activation(x @ w + b) with exact backward via the tape."""
    x = ad.as_tensor(x)
    if x.data.shape[-1] != w.data.shape[0]:
        raise DimensionError(f"dense: input {x.data.shape} incompatible with weights {w.data.shape}")
    if b.data.shape != (w.data.shape[1],):
        raise DimensionError(f"dense: bias {b.data.shape} incompatible with weights {w.data.shape}")
    z = ad.add(ad.matmul(x, w), b)
    if activation == "identity":
        return z
    if activation == "relu":
        return ad.relu(z)
    if activation == "sigmoid":
        return ad.sigmoid(z)
    raise ConfigError(f"unknown activation {activation!r}")


def layer_norm(x: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Per-row standardization to mean 0, variance 1 (no learned gain/bias)."""
    x = ad.as_tensor(x)
    if x.data.shape[-1] < 2:
        raise DimensionError(f"layer_norm needs rows of length >= 2, got {x.data.shape}")
    mu = ad.tmean(x, axis=-1, keepdims=True)
    centered = ad.add(x, ad.mul(mu, -1.0))
    var = ad.tmean(ad.mul(centered, centered), axis=-1, keepdims=True)
    return ad.div(centered, ad.sqrt(ad.add(var, eps)))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Row-stochastic softmax with max-subtraction for overflow safety."""
    x = ad.as_tensor(x)
    shift = np.max(x.data, axis=axis, keepdims=True)  # constant; softmax is shift-invariant
    e = ad.exp(ad.add(x, -shift))
    return ad.div(e, ad.tsum(e, axis=axis, keepdims=True))


def huber(prediction: Tensor, target, delta: float = 1.0) -> Tensor:
    """Elementwise Huber loss; gradient w.r.t. prediction clips at +/-delta."""
    if delta <= 0:
        raise ConfigError(f"huber delta must be positive, got {delta}")
    prediction = ad.as_tensor(prediction)
    tgt = np.asarray(target, dtype=np.float64)
    err = prediction.data - tgt
    quad = np.abs(err) <= delta
    data = np.where(quad, 0.5 * err * err, delta * (np.abs(err) - 0.5 * delta))

    def backward(g: Array) -> None:
        if prediction.requires_grad:
            prediction._accumulate(g * np.clip(err, -delta, delta))

    return ad._make(data, (prediction,), backward)


def select_columns(x: Tensor, idx: Array) -> Tensor:
    """Per-row column pick: out[i] = x[i, idx[i]] via one-hot contraction."""
    idx = np.asarray(idx, dtype=np.int64)
    onehot = np.zeros(x.data.shape, dtype=np.float64)
    onehot[np.arange(x.data.shape[0]), idx] = 1.0
    return ad.tsum(ad.mul(x, onehot), axis=1)


# ---------------------------------------------------------------------------
# Modules
# ---------------------------------------------------------------------------


class Dense:
    """Affine layer bound to ParamSet paths `<prefix>/w` and `<prefix>/b`."""

    def __init__(
        self,
        params: ParamSet,
        prefix: str,
        n_in: int,
        n_out: int,
        rng: np.random.Generator | None = None,
        activation: str = "identity",
    ):
        self.w_path = f"{prefix}/w"
        self.b_path = f"{prefix}/b"
        self.activation = activation
        if rng is not None:
            params.add(self.w_path, glorot_uniform(rng, n_in, n_out, (n_in, n_out)))
            params.add(self.b_path, np.zeros(n_out))

    def __call__(self, ps, x: Tensor) -> Tensor:
        return dense_forward(x, ps[self.w_path], ps[self.b_path], self.activation)


class MLP:
    """Stack of Dense layers; relu on hidden layers, configurable output."""

    def __init__(
        self,
        params: ParamSet,
        prefix: str,
        widths: list[int],
        rng: np.random.Generator | None = None,
        out_activation: str = "identity",
    ):
        if len(widths) < 2:
            raise ConfigError(f"MLP needs at least [in, out] widths, got {widths}")
        self.widths = list(widths)
        self.layers = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            act = out_activation if i == len(widths) - 2 else "relu"
            self.layers.append(Dense(params, f"{prefix}/l{i}", a, b, rng, act))

    def __call__(self, ps, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(ps, x)
        return x


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Per-parameter Adam moments plus shared hyper-parameters.

    `lr_overrides` maps path prefixes to learning rates; the longest
    matching prefix wins, else `lr` applies.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    lr_overrides: dict[str, float] = field(default_factory=dict)
    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)

    def lr_for(self, path: str) -> float:
        best, best_len = self.lr, -1
        for prefix, rate in self.lr_overrides.items():
            if path.startswith(prefix) and len(prefix) > best_len:
                best, best_len = rate, len(prefix)
        return best


def _adam_flat(params: ParamSet, state: AdamState) -> None:
    grad = params._flat_grad
    if not np.all(np.isfinite(grad)):
        for path, p in params.items():
            if not np.all(np.isfinite(p.grad)):
                raise NumericFault(f"non-finite gradient for parameter {path!r}")
    key = "__flat__"
    if key not in state.m:
        state.m[key] = np.zeros_like(grad)
        state.v[key] = np.zeros_like(grad)
        lr = np.empty_like(grad)
        for path, off, n in params._layout:
            lr[off : off + n] = state.lr_for(path)
        state.m["__flat_lr__"] = lr
        state.v["__flat_scratch__"] = np.empty_like(grad)
    m, v = state.m[key], state.v[key]
    lr, scratch = state.m["__flat_lr__"], state.v["__flat_scratch__"]
    m *= state.beta1
    np.multiply(grad, 1.0 - state.beta1, out=scratch)
    m += scratch
    v *= state.beta2
    np.multiply(grad, grad, out=scratch)
    scratch *= 1.0 - state.beta2
    v += scratch
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    np.divide(v, c2, out=scratch)
    np.sqrt(scratch, out=scratch)
    scratch += state.eps
    np.divide(m, scratch, out=scratch)
    scratch *= lr
    scratch *= 1.0 / c1
    params._flat_data -= scratch


def adam_step(params: ParamSet, state: AdamState) -> None:
    """One bias-corrected Adam update; gradients are zeroed afterwards."""
    state.step += 1
    if params._flat_grad is not None:
        _adam_flat(params, state)
        params.zero_grad()
        return
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for path, p in params.items():
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericFault(f"non-finite gradient for parameter {path!r}")
        m = state.m.setdefault(path, np.zeros_like(p.data))
        v = state.v.setdefault(path, np.zeros_like(p.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr_for(path) * (m / c1) / (np.sqrt(v / c2) + state.eps)
    params.zero_grad()


def clip_grad_norm(params: ParamSet, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most `max_norm`."""
    if params._flat_grad is not None:
        g = params._flat_grad
        norm = float(np.sqrt(np.dot(g, g)))
        if norm > max_norm > 0:
            g *= max_norm / norm
        return norm
    total = 0.0
    for _, p in params.items():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = float(np.sqrt(total))
    if norm > max_norm > 0:
        scale = max_norm / norm
        for _, p in params.items():
            if p.grad is not None:
                p.grad *= scale
    return norm


# ---------------------------------------------------------------------------
# Finite-difference gradient verification
# ---------------------------------------------------------------------------


@dataclass
class GradCheckEntry:
    path: str
    max_rel_error: float
    checked: int
    ok: bool


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tolerance: float

    @property
    def ok(self) -> bool:
        return all(e.ok for e in self.entries)

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def failures(self) -> list[GradCheckEntry]:
        return [e for e in self.entries if not e.ok]


def grad_check(
    forward: Callable[[], Tensor],
    params: ParamSet,
    tolerance: float = 1e-4,
    paths: list[str] | None = None,
    max_entries_per_param: int = 24,
    h: float = GRAD_CHECK_STEP,
    rng: np.random.Generator | None = None,
    analytic_grads: Mapping[str, Array] | None = None,
) -> GradCheckReport:
    """Compare backprop gradients against central finite differences.

    `forward` must be a deterministic scalar-valued closure over `params`.
    When `analytic_grads` is given those gradients are checked instead of
    freshly backpropagated ones (useful for validating externally computed
    gradients and for sanity-testing the checker itself).
    """
    rng = rng or np.random.default_rng(0)
    check_paths = paths if paths is not None else params.paths()

    if analytic_grads is None:
        params.zero_grad()
        root = forward()
        if not np.all(np.isfinite(root.data)):
            raise NumericFault("non-finite forward value in grad_check")
        root.backward()
        grads = {p: params[p].grad.copy() for p in check_paths}
    else:
        grads = {p: np.asarray(analytic_grads[p], dtype=np.float64) for p in check_paths}

    entries: list[GradCheckEntry] = []
    for path in check_paths:
        tensor = params[path]
        flat = tensor.data.reshape(-1)
        n = flat.size
        if n <= max_entries_per_param:
            picks = np.arange(n)
        else:
            picks = rng.choice(n, size=max_entries_per_param, replace=False)
        g_flat = grads[path].reshape(-1)
        worst = 0.0
        for j in picks:
            orig = flat[j]
            flat[j] = orig + h
            f_plus = float(forward().data)
            flat[j] = orig - h
            f_minus = float(forward().data)
            flat[j] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericFault(f"non-finite forward value while perturbing {path!r}")
            numeric = (f_plus - f_minus) / (2.0 * h)
            denom = max(abs(numeric), abs(g_flat[j]), 1e-6)
            worst = max(worst, abs(numeric - g_flat[j]) / denom)
        entries.append(GradCheckEntry(path, worst, len(picks), worst <= tolerance))
    return GradCheckReport(entries, tolerance)
