"""Embedding lookup, target attention pooling, and the stop-gradient
boundary of the latent state."""

import numpy as np
import pytest

from livealloc import autodiff as ad
from livealloc import nn
from livealloc.encoder import (
    Encoder,
    EncoderConfig,
    StateBatch,
    TargetAttention,
    batch_from_states,
    hash_to_rows,
)

SMALL = EncoderConfig(embed_rows=97, embed_dim=4, attention_hidden=8, mlp_widths=(12, 6), max_history=10)


def _build(seed=0, cfg=SMALL):
    ps = nn.ParamSet()
    enc = Encoder(ps, cfg, np.random.default_rng(seed))
    return ps, enc


def _state(group=0, live_hist=(4_000_000_001, 4_000_000_002), video_hist=(8_000_000_001,)):
    return {
        "user_static_ids": [1_000_000_007, 2_000_000_001, 3_000_000_004],
        "live_item_ids": [4_000_000_009, 5_000_000_002, 6_000_000_003, 7_000_000_001],
        "live_history_ids": list(live_hist),
        "video_history_ids": list(video_hist),
        "group_id": group,
    }


# ---------------------------------------------------------------------------
# hashing + lookup
# ---------------------------------------------------------------------------


def test_hash_is_total_and_in_range():
    ids = np.array([0, 1, 2**63, 2**64 - 1, 12345678901234567])
    rows = hash_to_rows(ids, 5000)
    assert rows.dtype == np.int64
    assert np.all((rows >= 0) & (rows < 5000))


def test_embed_same_id_gives_identical_rows():
    ps, enc = _build()
    out = enc.embed(ps, [42, 42, 43])
    np.testing.assert_array_equal(out.data[0], out.data[1])
    assert not np.array_equal(out.data[0], out.data[2])


def test_embed_gradient_touches_only_looked_up_rows():
    ps, enc = _build()
    table = ps[enc.table_path]
    out = ad.tsum(enc.embed(ps, [42]))
    out.backward()
    row = int(hash_to_rows([42], SMALL.embed_rows)[0])
    assert np.any(table.grad[row] != 0.0)
    mask = np.ones(SMALL.embed_rows, dtype=bool)
    mask[row] = False
    assert np.all(table.grad[mask] == 0.0)


def test_embed_empty_sequence_gives_zero_rows():
    ps, enc = _build()
    out = enc.embed(ps, [])
    assert out.shape == (0, SMALL.embed_dim)


# ---------------------------------------------------------------------------
# target attention
# ---------------------------------------------------------------------------


def _attention(seed=1, q_dim=6, d=4):
    ps = nn.ParamSet()
    attn = TargetAttention(ps, "attn", q_dim, d, hidden=8, rng=np.random.default_rng(seed))
    return ps, attn


def test_attention_identical_items_pool_to_that_item():
    ps, attn = _attention()
    rng = np.random.default_rng(2)
    e = rng.normal(size=4)
    items = ad.Tensor(np.tile(e, (1, 5, 1)))
    query = ad.Tensor(rng.normal(size=(1, 6)))
    pooled, _ = attn.pool(ps, query, items, np.ones((1, 5)))
    np.testing.assert_allclose(pooled.data[0], e, atol=1e-12)


def test_attention_single_item_passthrough():
    ps, attn = _attention()
    rng = np.random.default_rng(3)
    e = rng.normal(size=4)
    pooled, _ = attn.pool(ps, ad.Tensor(rng.normal(size=(1, 6))), ad.Tensor(e.reshape(1, 1, 4)), np.ones((1, 1)))
    np.testing.assert_allclose(pooled.data[0], e, atol=1e-12)


def test_attention_weights_sum_to_one():
    ps, attn = _attention()
    rng = np.random.default_rng(4)
    mask = np.ones((6, 7))
    mask[2, 4:] = 0.0
    _, weights = attn.pool(ps, ad.Tensor(rng.normal(size=(6, 6))), ad.Tensor(rng.normal(size=(6, 7, 4))), mask)
    sums = weights.data.sum(axis=1).ravel()
    assert np.all(np.abs(sums - 1.0) < 1e-12)


def test_attention_empty_history_pools_to_zero():
    ps, attn = _attention()
    rng = np.random.default_rng(5)
    pooled, _ = attn.pool(ps, ad.Tensor(rng.normal(size=(1, 6))), ad.Tensor(rng.normal(size=(1, 3, 4))), np.zeros((1, 3)))
    np.testing.assert_array_equal(pooled.data, np.zeros((1, 4)))


# ---------------------------------------------------------------------------
# encode
# ---------------------------------------------------------------------------


def test_encode_modes_bitwise_identical_forward():
    ps, enc = _build()
    batch = batch_from_states([_state(), _state(group=1, live_hist=())], SMALL)
    a = enc.encode(ps, batch, mode="critic_path")
    b = enc.encode(ps, batch, mode="actor_path")
    assert a.h_prime_s.data.tobytes() == b.h_prime_s.data.tobytes()
    assert b.empty_live_rows == 1


def test_encode_actor_path_blocks_all_encoder_gradients():
    ps, enc = _build()
    batch = batch_from_states([_state()], SMALL)
    out = enc.encode(ps, batch, mode="actor_path")
    loss = ad.tsum(ad.mul(out.h_prime_s, out.h_prime_s))
    assert not loss.requires_grad  # constant: nothing to backprop into
    ps.zero_grad()
    assert ps.grad_norm("encoder") == 0.0


def test_encode_critic_path_reaches_embeddings():
    ps, enc = _build()
    batch = batch_from_states([_state()], SMALL)
    out = enc.encode(ps, batch, mode="critic_path")
    ps.zero_grad()
    ad.tsum(ad.mul(out.h_prime_s, out.h_prime_s)).backward()
    assert ps.grad_norm("encoder/embedding") > 0.0


def test_encode_deterministic_and_dims():
    ps, enc = _build()
    batch = batch_from_states([_state()], SMALL)
    a = enc.encode(ps, batch).h_prime_s.data
    b = enc.encode(ps, batch).h_prime_s.data
    np.testing.assert_array_equal(a, b)
    assert a.shape == (1, SMALL.latent_dim)
    assert enc.encode(ps, batch).h_s.shape == (1, SMALL.state_dim)


def test_attention_pooling_permutation_invariant():
    ps, enc = _build()
    hist = [4_000_000_000 + i for i in range(7)]
    base = enc.encode(ps, batch_from_states([_state(live_hist=hist)], SMALL)).h_prime_s.data
    rng = np.random.default_rng(8)
    for _ in range(5):
        shuffled = list(hist)
        rng.shuffle(shuffled)
        out = enc.encode(ps, batch_from_states([_state(live_hist=shuffled)], SMALL)).h_prime_s.data
        np.testing.assert_allclose(out, base, atol=1e-12)


def test_histories_truncate_to_max_history():
    cfg = SMALL
    long_hist = [4_000_000_000 + i for i in range(40)]
    batch = batch_from_states([_state(live_hist=long_hist)], cfg)
    assert batch.live_hist.shape[1] == cfg.max_history


def test_full_encoder_gradients_match_finite_differences():
    ps, enc = _build(seed=7)
    batch = batch_from_states([_state(), _state(group=2)], SMALL)
    coef = np.random.default_rng(0).normal(size=(2, SMALL.latent_dim))

    def build():
        return ad.tsum(ad.mul(enc.encode(ps, batch, mode="critic_path").h_prime_s, coef))

    report = nn.grad_check(build, ps, tolerance=1e-5, max_entries_per_param=12)
    assert report.ok, report.failures()
