"""Training-loop mechanics: loss wiring, ablation flags, determinism,
snapshots, and failure forensics."""

import json
import threading

import numpy as np
import pytest

from livealloc import feedsim, trainer
from livealloc.dataset import build_arrays, split_by_trajectory
from livealloc.encoder import EncoderConfig
from livealloc.errors import ConfigError, NumericFault
from livealloc.nn import AdamState
from livealloc.trainer import (
    AblationFlags,
    Model,
    SnapshotPublisher,
    TrainConfig,
    VARIANTS,
    actor_loss_for_batch,
    compute_batch_losses,
    compute_labels,
    critic_and_sl_losses,
    load_policy,
    save_snapshot,
    snapshot_policy,
    train,
    train_streaming,
)

SMALL_ENC = EncoderConfig(embed_rows=211, embed_dim=4, attention_hidden=8, mlp_widths=(24, 16), max_history=8)


def _cfg(**kw):
    base = dict(
        batch_size=32,
        max_steps=8,
        eval_every=4,
        probe_size=64,
        publish_every=4,
        seed=0,
        encoder=SMALL_ENC,
        actor_template=(16, 12, 6, 2),
        ratio_template=(16, 12, 6, 8),
        residual_template=(16, 12, 6, 2),
    )
    base.update(kw)
    if isinstance(base.get("ablation"), str):
        base["ablation"] = AblationFlags.from_names(base["ablation"])
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def arrays(small_dataset):
    return build_arrays(small_dataset, SMALL_ENC)


def test_template_width_must_match_latent():
    with pytest.raises(ConfigError):
        _cfg(actor_template=(32, 8, 2))


def test_config_roundtrip_and_digest():
    cfg = _cfg(ablation="no_mg no_dd")
    again = TrainConfig.from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()
    assert again.config_digest() == cfg.config_digest()
    assert cfg.config_digest() != _cfg(seed=1).config_digest()


def test_loss_additivity(arrays):
    # gradient of the summed loss equals the sum of per-loss gradients
    cfg = _cfg()
    batch = arrays.take(np.arange(24))

    model = Model(cfg)
    losses = compute_batch_losses(model, batch)
    model.params.zero_grad()
    losses.total.backward()
    joint = {p: model.params[p].grad.copy() for p in model.params.paths()}

    model2 = Model(cfg)  # same seed -> identical parameters
    labels = compute_labels(model2, batch)
    parts = {}
    l_critic, l_sl, h_in = critic_and_sl_losses(model2, batch, labels)
    l_actor, _ = actor_loss_for_batch(model2, batch, h_critic_in=h_in)
    for name, term in (("critic", l_critic), ("sl", l_sl), ("actor", l_actor)):
        model2.params.zero_grad()
        term.backward()
        parts[name] = {p: model2.params[p].grad.copy() for p in model2.params.paths()}
    for path in joint:
        summed = parts["critic"][path] + parts["sl"][path] + parts["actor"][path]
        np.testing.assert_allclose(joint[path], summed, atol=1e-10)


def test_learning_rate_routing_in_train(arrays):
    cfg = _cfg(max_steps=2, lr_embedding=1e-5, lr_hidden=1e-3)
    result = train(arrays, cfg)
    # reconstruct the AdamState wiring: embedding prefix gets the slow rate
    state = AdamState(lr=cfg.lr_hidden, lr_overrides={"encoder/embedding": cfg.lr_embedding})
    assert state.lr_for("encoder/embedding/table") == 1e-5
    assert state.lr_for("critic1/residual/l0/w") == 1e-3
    assert state.lr_for("actor/l2/b") == 1e-3


def test_flags_compose_variant_graphs():
    cfg = _cfg(ablation="no_mg no_dd no_sl")
    model = Model(cfg)
    assert cfg.effective_k == 1
    assert model.bins.n_intervals == 1  # scaled-seconds regression
    assert model.critics.nets[0].f_gamma.out_dim == 2
    assert cfg.ablation.names() == ["no_mg", "no_dd", "no_sl"]


def test_no_sl_drops_the_ratio_loss(arrays):
    result = train(arrays, _cfg(max_steps=2, ablation="no_sl"))
    assert result.loss_terms == ("L_actor", "L_critic")
    assert all(row["L_SL"] == 0.0 for row in result.metrics)


def test_gamma_zero_q_equals_reward_prediction(arrays):
    cfg = _cfg(ablation="gamma_zero")
    model = Model(cfg)
    assert model.hyper.gamma == 0.0
    batch = arrays.take(np.arange(16))
    from livealloc.critic import bin_arrays

    h = model.encoder.encode(model.params.detached(), batch.states, "critic_path").h_prime_s
    h_in = model.tower_input(h)
    groups = model.route_groups(batch.states.group_ids)
    li, _ = bin_arrays(batch.y_l, model.bins, "live", actions=batch.actions)
    vi, _ = bin_arrays(batch.y_v, model.bins, "video")
    out = model.critics.nets[0].q_forward(
        model.params.detached(), h_in, groups, batch.actions, li, vi, model._hyper_inner
    )
    np.testing.assert_array_equal(out.q.data, out.r.data)


def test_vanilla_label_mode_flagged(arrays):
    result = train(arrays, _cfg(max_steps=2, ablation="vanilla_label"))
    assert result.label_mode == "vanilla"
    assert train(arrays, _cfg(max_steps=2)).label_mode == "greedy"


def test_sep_actor_variant_runs(arrays):
    result = train(arrays, _cfg(max_steps=4, ablation="sep_actor"))
    assert result.steps_run == 4 and len(result.metrics) == 1  # eval at step 4 only


def test_no_sg_lets_actor_gradients_reach_encoder(arrays):
    batch = arrays.take(np.arange(16))
    for flags, expect_zero in (("", True), ("no_sg", False)):
        model = Model(_cfg(ablation=flags))
        l_actor, _ = actor_loss_for_batch(model, batch)
        model.params.zero_grad()
        l_actor.backward()
        enc_norm = model.params.grad_norm("encoder")
        assert (enc_norm == 0.0) is expect_zero


def test_training_determinism(arrays):
    cfg = _cfg(max_steps=6, eval_every=2)
    r1 = train(arrays, cfg)
    r2 = train(arrays, cfg)
    assert len(r1.metrics) == len(r2.metrics)
    for a, b in zip(r1.metrics, r2.metrics):
        for key in ("step", "L_actor", "L_critic", "L_SL", "mean_Q", "max_Q", "alloc_ratio"):
            assert a[key] == b[key]
    for path in r1.model.params.paths():
        assert r1.model.params[path].data.tobytes() == r2.model.params[path].data.tobytes()


def test_metrics_csv_written_with_fixed_header(arrays, tmp_path):
    out = tmp_path / "run"
    result = train(arrays, _cfg(max_steps=4, eval_every=2), out_dir=out)
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == "step,L_actor,L_critic,L_SL,mean_Q,max_Q,alloc_ratio,wall_ms"
    assert len(lines) == 1 + len(result.metrics)
    assert (out / "config.json").exists()
    assert (out / "snapshot.json").exists()
    assert (out / f"checkpoint_{result.steps_run:06d}.json").exists()


def test_nan_losses_abort_with_forensics(arrays, tmp_path):
    out = tmp_path / "blowup"
    cfg = _cfg(max_steps=40, lr_hidden=1e280, lr_embedding=1e280, grad_clip=0.0)
    with pytest.raises(NumericFault):
        with np.errstate(all="ignore"):
            train(arrays, cfg, out_dir=out)
    dump = json.loads((out / "forensics.json").read_text())
    assert "step" in dump and "losses" in dump


def test_collapse_flag_false_on_short_run(arrays):
    assert train(arrays, _cfg(max_steps=6)).collapsed is False


# ---------------------------------------------------------------------------
# snapshots
# ---------------------------------------------------------------------------


def test_snapshot_versions_and_forward_equality(arrays):
    cfg = _cfg(max_steps=4)
    publisher = SnapshotPublisher()
    result = train(arrays, cfg, publisher=publisher)
    snap = publisher.latest()
    assert snap is not None and snap.verify()
    policy = snapshot_policy(snap, cfg)
    probe = arrays.take(np.arange(20))
    live = result.model.policy()
    np.testing.assert_array_equal(policy.probs_batch(probe.states), live.probs_batch(probe.states))


def test_snapshot_save_load_roundtrip(arrays, tmp_path):
    cfg = _cfg(max_steps=2)
    result = train(arrays, cfg)
    path = tmp_path / "snap.json"
    save_snapshot(result.final_snapshot, cfg, path)
    policy, extra = load_policy(path)
    assert extra["version"] == result.final_snapshot.version
    probe = arrays.take(np.arange(12))
    np.testing.assert_array_equal(
        policy.probs_batch(probe.states), result.model.policy().probs_batch(probe.states)
    )


def test_snapshot_publisher_concurrent_readers(arrays):
    # smoke-scale version of the atomicity contract (full size in acceptance)
    cfg = _cfg(max_steps=2)
    model = Model(cfg)
    publisher = SnapshotPublisher()
    publisher.publish(model)
    stop = threading.Event()
    failures = []

    def reader():
        last = 0
        while not stop.is_set():
            snap = publisher.latest()
            if snap is None:
                continue
            if not snap.verify() or snap.version < last:
                failures.append(snap.version)
                return
            last = snap.version

    threads = [threading.Thread(target=reader) for _ in range(3)]
    for th in threads:
        th.start()
    for _ in range(200):
        model.params._flat_data += 0.001
        publisher.publish(model)
    stop.set()
    for th in threads:
        th.join()
    assert not failures
    assert publisher.latest().version == 201


# ---------------------------------------------------------------------------
# streaming + suite
# ---------------------------------------------------------------------------


def test_streaming_mode_runs_and_publishes(default_sim_config):
    cfg = _cfg(batch_size=64, eval_every=2, publish_every=2, epsilon=0.2)
    publisher = SnapshotPublisher()
    result = train_streaming(
        default_sim_config, cfg, num_sessions=12, max_steps_per_session=30, publisher=publisher
    )
    assert result.steps_run >= 1
    assert publisher.latest().version >= 2
    assert result.final_snapshot.verify()


def test_run_variant_suite_format(small_split, tmp_path):
    train_ds, eval_ds = small_split
    cfg = _cfg(max_steps=3, eval_every=3)
    table = trainer.run_variant_suite(
        cfg, ["full", "no_qnorm"], [0, 1], train_ds, eval_ds, cap=10.0, out_dir=tmp_path
    )
    assert len(table["rows"]) == 4  # one row per (variant, seed)
    assert {r["variant"] for r in table["rows"]} == {"full", "no_qnorm"}
    assert len(table["aggregates"]) == 2
    assert (tmp_path / "suite.json").exists()
    vanilla_cfg = _cfg(max_steps=2, ablation="vanilla_label")
    assert train(build_arrays(train_ds, SMALL_ENC), vanilla_cfg).label_mode == "vanilla"
    assert sorted(VARIANTS) == sorted(
        ["full", "no_mg", "no_mg_dd", "no_mg_dd_sl", "no_ln", "no_sg", "no_qnorm", "gamma0", "sep_actor", "vanilla_label"]
    )
