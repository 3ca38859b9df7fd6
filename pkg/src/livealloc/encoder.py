"""State feature extraction: shared embeddings, two target-attention
history poolers, and a shared MLP producing the latent state.

The actor consumes the latent through a stop-gradient boundary: in
`actor_path` mode the forward pass runs over detached parameters, so the
backward pass of any loss built on top cannot reach the embedding table,
the attention networks, or the shared MLP.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .errors import ConfigError

_HASH_MULTIPLIER = np.uint64(0x9E3779B97F4A7C15)
_MASK_NEG = 1e9  # subtracted from padded attention scores before softmax


def hash_to_rows(ids, rows: int) -> np.ndarray:
    """64-bit multiplicative hash of raw ids into [0, rows); total on ints."""
    arr = np.asarray(ids)
    if arr.dtype.kind in ("i", "u"):
        arr = arr.astype(np.uint64)
    else:  # lists holding ints beyond int64 range arrive as object/float
        arr = np.array(
            [int(i) & 0xFFFFFFFFFFFFFFFF for i in arr.ravel().tolist()], dtype=np.uint64
        ).reshape(arr.shape)
    return ((arr * _HASH_MULTIPLIER) % np.uint64(rows)).astype(np.int64)


@dataclass
class EncoderConfig:
    embed_rows: int = 5000
    embed_dim: int = 16
    n_user_fields: int = 3
    n_live_fields: int = 4
    max_history: int = 50
    attention_hidden: int = 32
    mlp_widths: tuple[int, int] = (256, 128)

    @property
    def query_dim(self) -> int:
        return (self.n_user_fields + self.n_live_fields) * self.embed_dim

    @property
    def state_dim(self) -> int:
        return self.query_dim + 2 * self.embed_dim

    @property
    def latent_dim(self) -> int:
        return self.mlp_widths[-1]


@dataclass
class StateBatch:
    """Hashed, padded feature arrays for a batch of observed states."""

    user_ids: np.ndarray  # (n, n_user_fields) int64 rows into the table
    live_ids: np.ndarray  # (n, n_live_fields)
    live_hist: np.ndarray  # (n, m_l)
    live_mask: np.ndarray  # (n, m_l) float 0/1
    video_hist: np.ndarray
    video_mask: np.ndarray
    group_ids: np.ndarray  # (n,) int64

    @property
    def n(self) -> int:
        return self.user_ids.shape[0]

    def take(self, idx: np.ndarray) -> "StateBatch":
        return StateBatch(
            self.user_ids[idx],
            self.live_ids[idx],
            self.live_hist[idx],
            self.live_mask[idx],
            self.video_hist[idx],
            self.video_mask[idx],
            self.group_ids[idx],
        ).trimmed()

    def trimmed(self) -> "StateBatch":
        """Drop trailing all-padded history columns (valid entries are
        left-aligned), keeping at least one column."""
        ml = max(1, int(self.live_mask.sum(axis=1).max(initial=0)))
        mv = max(1, int(self.video_mask.sum(axis=1).max(initial=0)))
        return StateBatch(
            self.user_ids,
            self.live_ids,
            self.live_hist[:, :ml],
            self.live_mask[:, :ml],
            self.video_hist[:, :mv],
            self.video_mask[:, :mv],
            self.group_ids,
        )


def _pad_histories(histories: list[list[int]], cap: int, rows: int) -> tuple[np.ndarray, np.ndarray]:
    m = max(1, max((len(h) for h in histories), default=0))
    m = min(m, cap)
    idx = np.zeros((len(histories), m), dtype=np.int64)
    mask = np.zeros((len(histories), m), dtype=np.float64)
    for i, h in enumerate(histories):
        h = h[-cap:]
        if h:
            idx[i, : len(h)] = hash_to_rows(h, rows)
            mask[i, : len(h)] = 1.0
    return idx, mask


def batch_from_states(states: Sequence[dict], cfg: EncoderConfig) -> StateBatch:
    """Hash and pad a list of observed-state dicts into a StateBatch."""
    user = np.stack([hash_to_rows(s["user_static_ids"], cfg.embed_rows) for s in states])
    live = np.stack([hash_to_rows(s["live_item_ids"], cfg.embed_rows) for s in states])
    lh, lm = _pad_histories([s["live_history_ids"] for s in states], cfg.max_history, cfg.embed_rows)
    vh, vm = _pad_histories([s["video_history_ids"] for s in states], cfg.max_history, cfg.embed_rows)
    groups = np.array([s["group_id"] for s in states], dtype=np.int64)
    return StateBatch(user, live, lh, lm, vh, vm, groups)


@dataclass
class EncodedState:
    h_a: Tensor  # (n, query_dim) concatenated user + candidate embeddings
    h_live: Tensor  # (n, embed_dim) attention-pooled live history
    h_video: Tensor  # (n, embed_dim) attention-pooled video history
    h_s: Tensor  # (n, state_dim) full concatenation
    h_prime_s: Tensor  # (n, latent_dim) shared-MLP latent
    mode: str
    empty_live_rows: int
    empty_video_rows: int


class TargetAttention:
    """Score-and-pool over a padded history, conditioned on a query.

    Per item the score hidden layer sees [query, item, proj(query) * item];
    the query block of the first weight matrix is applied once per row and
    broadcast across items. Scores are softmax-normalized across the
    (unpadded) items and the output is the score-weighted sum of item
    embeddings. An empty history pools to the zero vector.
    """

    def __init__(self, params: nn.ParamSet, prefix: str, query_dim: int, item_dim: int, hidden: int, rng=None):
        self.proj = nn.Dense(params, f"{prefix}/proj", query_dim, item_dim, rng)
        fan_in = query_dim + 2 * item_dim
        self.wq_path = f"{prefix}/score/wq"
        self.wi_path = f"{prefix}/score/wi"
        self.wx_path = f"{prefix}/score/wx"
        self.b1_path = f"{prefix}/score/b1"
        if rng is not None:
            params.add(self.wq_path, nn.glorot_uniform(rng, fan_in, hidden, (query_dim, hidden)))
            params.add(self.wi_path, nn.glorot_uniform(rng, fan_in, hidden, (item_dim, hidden)))
            params.add(self.wx_path, nn.glorot_uniform(rng, fan_in, hidden, (item_dim, hidden)))
            params.add(self.b1_path, np.zeros(hidden))
        self.out = nn.Dense(params, f"{prefix}/score/out", hidden, 1, rng)

    def pool(self, ps, query: Tensor, items: Tensor, mask: np.ndarray) -> tuple[Tensor, Tensor]:
        n, m, d = items.shape
        mask3 = mask.reshape(n, m, 1)
        items_masked = ad.mul(items, mask3)
        pq = self.proj(ps, query)  # (n, d)
        q_block = ad.reshape(ad.matmul(query, ps[self.wq_path]), (n, 1, -1))
        i_block = ad.matmul(items_masked, ps[self.wi_path])
        x_block = ad.matmul(ad.mul(ad.reshape(pq, (n, 1, d)), items_masked), ps[self.wx_path])
        hidden = ad.relu(ad.add(ad.add(ad.add(q_block, i_block), x_block), ps[self.b1_path]))
        scores = self.out(ps, hidden)  # (n, m, 1)
        masked_scores = ad.add(ad.mul(scores, mask3), (mask3 - 1.0) * _MASK_NEG)
        weights = ad.mul(nn.softmax(masked_scores, axis=1), mask3)
        pooled = ad.tsum(ad.mul(weights, items_masked), axis=1)
        return pooled, weights


class Encoder:
    def __init__(self, params: nn.ParamSet, cfg: EncoderConfig, rng=None, prefix: str = "encoder"):
        if cfg.latent_dim < 2:
            raise ConfigError(f"latent dim must be >= 2, got {cfg.mlp_widths}")
        self.cfg = cfg
        self.prefix = prefix
        self.table_path = f"{prefix}/embedding/table"
        if rng is not None:
            params.add(self.table_path, nn.glorot_uniform(rng, cfg.embed_rows, cfg.embed_dim, (cfg.embed_rows, cfg.embed_dim)))
        self.attn_live = TargetAttention(params, f"{prefix}/attn_live", cfg.query_dim, cfg.embed_dim, cfg.attention_hidden, rng)
        self.attn_video = TargetAttention(params, f"{prefix}/attn_video", cfg.query_dim, cfg.embed_dim, cfg.attention_hidden, rng)
        self.f_mlp = nn.MLP(params, f"{prefix}/fmlp", [cfg.state_dim, *cfg.mlp_widths], rng, out_activation="relu")

    # -- single-sequence lookup (used by tests and diagnostics) -------------

    def embed(self, ps, raw_ids: Sequence[int]) -> Tensor:
        """One embedding row per raw id; empty input gives a zero-row tensor."""
        idx = hash_to_rows(list(raw_ids), self.cfg.embed_rows)
        return ad.take_rows(ps[self.table_path], idx)

    # -- batched encoding ----------------------------------------------------

    def encode(self, ps, batch: StateBatch, mode: str = "critic_path") -> EncodedState:
        """Map a StateBatch to the latent state.

        `critic_path` tracks gradients through every parameter;
        `actor_path` runs over detached parameters so the latent is a
        constant to any downstream backward pass. Forward values are
        identical in both modes.
        """
        if mode not in ("critic_path", "actor_path"):
            raise ConfigError(f"unknown encode mode {mode!r}")
        if mode == "actor_path" and hasattr(ps, "detached"):
            ps = ps.detached()
        cfg = self.cfg
        n = batch.n
        table = ps[self.table_path]

        # h_a is the concatenated user + candidate embeddings; one fused gather
        h_a = ad.reshape(
            ad.take_rows(table, np.concatenate([batch.user_ids, batch.live_ids], axis=1)),
            (n, cfg.query_dim),
        )

        live_items = ad.take_rows(table, batch.live_hist)
        video_items = ad.take_rows(table, batch.video_hist)
        h_live, _ = self.attn_live.pool(ps, h_a, live_items, batch.live_mask)
        h_video, _ = self.attn_video.pool(ps, h_a, video_items, batch.video_mask)

        h_s = ad.concat([h_a, h_live, h_video], axis=-1)
        h_prime = self.f_mlp(ps, h_s)
        return EncodedState(
            h_a=h_a,
            h_live=h_live,
            h_video=h_video,
            h_s=h_s,
            h_prime_s=h_prime,
            mode=mode,
            empty_live_rows=int(np.sum(batch.live_mask.sum(axis=1) == 0)),
            empty_video_rows=int(np.sum(batch.video_mask.sum(axis=1) == 0)),
        )
