import math
from dataclasses import replace

import numpy as np
import pytest

from ecroute.dit.model import ModelConfig, forward_tokens, init_params
from ecroute.dit.patches import patchify
from ecroute.flow import make_flow_batch, rf_loss
from ecroute.harness import (
    CheckpointError,
    ConfigError,
    RMSPropState,
    TrainConfig,
    TrainingDiverged,
    gen_dataset,
    learning_rate_at,
    load_checkpoint,
    load_config,
    mask_tokens,
    optimizer_step,
    sample_keep,
    save_checkpoint,
    smoothed,
    train_loop,
)
from ecroute.harness import train as train_mod
from ecroute.harness.checkpoint import read_manifest
from ecroute.harness.config import dump_config, parse_config_text
from ecroute.harness.data import NUM_CAPTIONS, caption_parts, caption_text
from ecroute.tensor import Tape, Tensor, backward

SMALL = ModelConfig(num_layers=2, hidden_dim=16, image_size=8, freq_dim=16)


def small_train(**kw):
    base = dict(batch_size=4, total_steps=6, warmup_steps=2, group_size_train=16, checkpoint_every=0,
                dataset_size=32, log_every=0)
    base.update(kw)
    return TrainConfig(**base)


def small_data(cfg=SMALL, n=32, seed=0):
    return gen_dataset(n, (cfg.image_size, cfg.image_size, cfg.channels), seed, cfg.text_dim)


# -- dataset ----------------------------------------------------------------

def test_dataset_deterministic_and_bounded():
    a, b = gen_dataset(20, seed=3), gen_dataset(20, seed=3)
    assert a.images.tobytes() == b.images.tobytes()
    np.testing.assert_array_equal(a.caption_ids, b.caption_ids)
    assert a.images.min() >= -1 and a.images.max() <= 1
    assert gen_dataset(20, seed=4).images.tobytes() != a.images.tobytes()


def test_caption_space():
    assert NUM_CAPTIONS == 3 * 4 * 4
    assert len({caption_parts(c) for c in range(NUM_CAPTIONS)}) == 48
    assert caption_text(0) == "a red circle in the top-left"
    with pytest.raises(ValueError):
        caption_parts(48)


def test_same_caption_same_embedding():
    ds = gen_dataset(200, seed=0)
    cid = int(ds.caption_ids[0])
    same = np.flatnonzero(ds.caption_ids == cid)
    assert len(same) > 1
    np.testing.assert_array_equal(ds[same[0]].caption_embedding, ds[same[1]].caption_embedding)
    np.testing.assert_array_equal(ds.context([cid])[0], ds.embeddings[cid])


def test_image_has_shape_in_quadrant():
    ds = gen_dataset(12, seed=1)
    for img, cid in zip(ds.images, ds.caption_ids):
        quad = caption_parts(int(cid))[2]
        fg = np.argwhere(np.any(img != -0.6, axis=-1))
        assert fg.size
        cy, cx = fg.mean(axis=0)
        assert (cy >= 8) == (quad >= 2) and (cx >= 8) == (quad % 2 == 1)


# -- masking ----------------------------------------------------------------

def test_mask_counts():
    rng = np.random.default_rng(0)
    kept, idx = mask_tokens(np.arange(256.0)[:, None], 0.5, rng)
    assert len(idx) == 128 and kept.shape == (128, 1)
    assert np.all(np.diff(idx) > 0)
    np.testing.assert_array_equal(kept[:, 0], idx)
    _, idx0 = mask_tokens(np.zeros((10, 2)), 0.0, rng)
    np.testing.assert_array_equal(idx0, np.arange(10))
    assert sample_keep(3, 7, 0.5, rng).shape == (3, math.ceil(3.5))
    with pytest.raises(ValueError):
        sample_keep(1, 4, 1.0, rng)


def test_masking_keeps_gradient_support():
    rng = np.random.default_rng(0)
    params = init_params(SMALL, rng)
    params = {k: Tensor(v.data + (0 if np.any(v.data) else 0.1 * rng.normal(size=v.shape)), requires_grad=True)
              for k, v in params.items()}
    ds = small_data()
    tokens = patchify(ds.images[:4], 2)
    ctx = ds.context(ds.caption_ids[:4])

    def support(ratio):
        r = np.random.default_rng(1)
        fb = make_flow_batch(tokens, r)
        if ratio:
            fb = fb.select(sample_keep(4, SMALL.seq_len, ratio, r))
        with Tape() as tape:
            loss = rf_loss(lambda x, t, c, positions=None: forward_tokens(params, SMALL, x, t, c, positions, 16).velocity,
                           fb, ctx)
        g = backward(loss, tape, wrt=list(params.values()))
        return {k for k, v in params.items() if np.any(g[v])}

    full, masked = support(0.0), support(0.5)
    assert full == masked == set(params)


# -- optimizer --------------------------------------------------------------

def test_warmup_schedule():
    assert learning_rate_at(0, 1e-3, 100) == 0
    assert learning_rate_at(50, 1e-3, 100) == pytest.approx(5e-4)
    assert learning_rate_at(100, 1e-3, 100) == 1e-3
    assert learning_rate_at(5000, 1e-3, 100) == 1e-3


def test_first_step_leaves_params_unchanged():
    cfg = TrainConfig(warmup_steps=10)
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    out = optimizer_step(p, {"w": np.array([0.3, 0.4])}, 0, cfg, RMSPropState())
    np.testing.assert_array_equal(out["w"].data, p["w"].data)


def test_hand_stepped_update():
    cfg = TrainConfig(learning_rate=0.01, warmup_steps=0, rms_decay=0.9, momentum=0.9, eps=1e-8)
    g = np.array([0.5, -2.0, 1e-3])
    state = RMSPropState()
    out = optimizer_step({"w": Tensor(np.zeros(3))}, {"w": g}, 5, cfg, state)
    # ms = 0.1 g^2 ; update = lr g / (sqrt(0.1)|g| + eps)
    want = -0.01 * g / (math.sqrt(0.1) * np.abs(g) + 1e-8)
    np.testing.assert_allclose(out["w"].data, want, rtol=1e-12)
    np.testing.assert_allclose(out["w"].data[:2], -0.01 / math.sqrt(0.1) * np.sign(g[:2]), rtol=1e-6)
    # second step with the same gradient
    out2 = optimizer_step(out, {"w": g}, 6, cfg, state)
    ms = 0.9 * 0.1 * g * g + 0.1 * g * g
    mom = 0.9 * (-want) + 0.01 * g / (np.sqrt(ms) + 1e-8)
    np.testing.assert_allclose(out2["w"].data, want - mom, rtol=1e-12)


def test_non_finite_gradient_names_parameter():
    with pytest.raises(FloatingPointError, match="'blocks.1.attn.wq'"):
        optimizer_step({"blocks.1.attn.wq": Tensor(np.zeros(2))}, {"blocks.1.attn.wq": np.array([np.nan, 0])}, 0,
                       TrainConfig(), RMSPropState())


# -- config -----------------------------------------------------------------

def test_config_file_grammar(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# toy\nnum_layers = 2   # shallow\n\nrouting_mode = token_choice\nlearning_rate = 5e-4\n"
                    "text_dim = none\n")
    model, train = load_config(path, {"total_steps": 500})
    assert model.num_layers == 2 and model.routing_mode == "token_choice" and model.text_dim == 16
    assert train.learning_rate == 5e-4 and train.total_steps == 500


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.cfg")
    with pytest.raises(ConfigError) as err:
        load_config(None, {"num_layers": "two", "bogus": 1, "mask_ratio": 1.5})
    text = str(err.value)
    assert "num_layers" in text and "bogus" in text
    with pytest.raises(ConfigError, match="mask_ratio"):
        load_config(None, {"mask_ratio": 1.5})
    with pytest.raises(ConfigError, match="warmup_steps"):
        load_config(None, {"total_steps": 10})
    with pytest.raises(ConfigError, match="key = value"):
        parse_config_text("just words")


def test_dump_config_round_trips(tmp_path):
    model, train = load_config(None, {"num_layers": 3, "seed": 9})
    path = tmp_path / "c.cfg"
    path.write_text(dump_config(model, train))
    assert load_config(path) == (model, train)


# -- checkpoints ------------------------------------------------------------

def test_checkpoint_round_trip_bitwise(tmp_path):
    params = init_params(SMALL, np.random.default_rng(0))
    a = save_checkpoint(params, tmp_path / "a.ckpt", SMALL)
    loaded, cfg = load_checkpoint(a)
    assert cfg == SMALL
    for k in params:
        assert loaded[k].data.tobytes() == params[k].data.tobytes()
    b = save_checkpoint(loaded, tmp_path / "b.ckpt", cfg)
    assert a.with_suffix(".bin").read_bytes() == b.with_suffix(".bin").read_bytes()
    assert a.read_text().replace("a.bin", "b.bin") == b.read_text()


def test_manifest_lists_each_tensor_once(tmp_path):
    params = init_params(SMALL, np.random.default_rng(0))
    _, _, entries = read_manifest(save_checkpoint(params, tmp_path / "m.ckpt", SMALL))
    names = [e[0] for e in entries]
    assert sorted(names) == sorted(params) and len(set(names)) == len(names)


def test_checkpoint_config_mismatch_names_tensors(tmp_path):
    small = ModelConfig(num_layers=2, hidden_dim=16)
    big = ModelConfig(num_layers=2, hidden_dim=24, num_heads=4, num_kv_heads=2)
    path = save_checkpoint(init_params(small, np.random.default_rng(0)), tmp_path / "s.ckpt", small)
    with pytest.raises(CheckpointError) as err:
        load_checkpoint(path, big)
    assert "blocks.1.attn.wq" in str(err.value) and "(16, 16)" in str(err.value)


def test_checkpoint_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "nope.ckpt")


# -- training loop ----------------------------------------------------------

def test_train_loop_determinism_and_outputs(tmp_path):
    cfg = small_train(checkpoint_every=3)
    r1 = train_loop(SMALL, cfg, small_data(), tmp_path / "a")
    r2 = train_loop(SMALL, cfg, small_data(), tmp_path / "b")
    assert (tmp_path / "a" / "loss.csv").read_bytes() == (tmp_path / "b" / "loss.csv").read_bytes()
    assert [p.name for p in r1.checkpoints] == ["step_000003.ckpt", "step_000006.ckpt"]
    for p1, p2 in zip(r1.checkpoints, r2.checkpoints):
        assert p1.with_suffix(".bin").read_bytes() == p2.with_suffix(".bin").read_bytes()
    lines = (tmp_path / "a" / "loss.csv").read_text().splitlines()
    assert lines[0] == "step,loss,aux_loss,imbalance" and len(lines) == 7
    assert (tmp_path / "a" / "timing.csv").exists() and (tmp_path / "a" / "config.txt").exists()


def test_expert_choice_run_is_balanced_without_aux():
    res = train_loop(SMALL, small_train(), small_data())
    assert all(h.imbalance == 0.0 and h.aux_loss == 0.0 for h in res.history)


def test_aux_loss_only_affects_token_choice():
    tc = replace(SMALL, routing_mode="token_choice", top_k=2)
    with_aux = train_loop(tc, small_train(aux_loss_coef=0.5), small_data())
    without = train_loop(tc, small_train(aux_loss_coef=0.0), small_data())
    assert all(h.aux_loss >= 1.0 - 1e-12 for h in with_aux.history)
    assert with_aux.history[0].loss == without.history[0].loss
    assert with_aux.history[-1].loss != without.history[-1].loss
    ec_a = train_loop(SMALL, small_train(aux_loss_coef=0.5), small_data())
    ec_b = train_loop(SMALL, small_train(aux_loss_coef=0.0), small_data())
    assert [h.loss for h in ec_a.history] == [h.loss for h in ec_b.history]


def test_dense_loss_invariant_to_grouping():
    dense = replace(SMALL, num_experts=0)
    ds = small_data(dense)
    params = init_params(dense, np.random.default_rng(0))
    params = {k: Tensor(v.data if np.any(v.data) else np.random.default_rng(1).normal(0, 0.1, v.shape))
              for k, v in params.items()}
    fb = make_flow_batch(patchify(ds.images[:4], 2), np.random.default_rng(2))
    ctx = ds.context(ds.caption_ids[:4])
    losses = [float(rf_loss(lambda x, t, c: forward_tokens(params, dense, x, t, c, None, g).velocity, fb, ctx).data)
              for g in (16, 4 * dense.seq_len, 7)]
    assert max(losses) - min(losses) <= 1e-9


def test_divergence_reports_step_and_keeps_checkpoint(tmp_path, monkeypatch):
    real = train_mod.rf_loss
    calls = {"n": 0}

    def flaky(*a, **kw):
        calls["n"] += 1
        out = real(*a, **kw)
        return out * Tensor(np.nan) if calls["n"] == 5 else out

    monkeypatch.setattr(train_mod, "rf_loss", flaky)
    with pytest.raises(TrainingDiverged) as err:
        train_loop(SMALL, small_train(checkpoint_every=2), small_data(), tmp_path)
    assert err.value.step == 4
    assert err.value.last_checkpoint.name == "step_000004.ckpt" and err.value.last_checkpoint.exists()
    assert len((tmp_path / "loss.csv").read_text().splitlines()) == 5


def test_smoothing_window():
    np.testing.assert_allclose(smoothed([1, 2, 3, 4], window=2), [1, 1.5, 2.5, 3.5])
