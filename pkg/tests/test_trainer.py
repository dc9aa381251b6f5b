import numpy as np
import pytest

import oracles
from cmsalgan import data as D
from cmsalgan import model as Mo
from cmsalgan import trainer as Tr
from cmsalgan.tensor import Tensor


def small_setup(seed=0, count=8, size=16, **train_kw):
    samples = D.synth_generate(D.SynthSpec(count=count, seed=seed, image_size=size))
    mcfg = Mo.ModelConfig.toy(image_size=size, base_channels=4, decoder_channels=8, fuse_channels=4,
                              lstm_hidden=4, edge_channels=4, edge_feature_channels=8,
                              disc_channels=(3, 4, 4, 4, 4, 4), disc_fc=(8, 2, 1))
    kw = dict(epochs=2, batch_size=4, seed=seed)
    kw.update(train_kw)
    return samples, mcfg, Tr.TrainConfig.toy(**kw)


def snapshot(params, names):
    return {k: params[k].data.copy() for k in names}


# --- Adam -------------------------------------------------------------------


def test_adam_matches_hand_stepped_reference():
    x = {"x": Tensor(np.array([1.0]))}
    st = Tr.AdamState()
    got = []
    for _ in range(3):
        Tr.adam_step(x, {"x": 2 * x["x"].data}, st, lr=0.1)
        got.append(float(x["x"].data[0]))
    ref = oracles.adam(1.0, lambda v: 2 * v, 0.1, 3)
    assert np.allclose(got, ref, rtol=0, atol=1e-10)
    assert st.step == 3


@pytest.mark.parametrize("g", [1e-6, -3.0, 250.0])
def test_adam_first_step_magnitude_is_lr(g):
    x = {"x": Tensor(np.array([0.0]))}
    Tr.adam_step(x, {"x": np.array([g])}, Tr.AdamState(), lr=0.01)
    assert x["x"].data[0] == pytest.approx(-0.01 * np.sign(g), rel=1e-2)


def test_adam_zero_grad_only_decays_moments():
    x = {"x": Tensor(np.array([0.5]))}
    st = Tr.AdamState()
    Tr.adam_step(x, {"x": np.array([1.0])}, st, lr=0.1)
    before, m = x["x"].data.copy(), st.m["x"].copy()
    st2 = Tr.AdamState(m={"x": np.zeros(1)}, v={"x": np.zeros(1)})
    y = {"x": Tensor(np.array([0.5]))}
    Tr.adam_step(y, {"x": np.zeros(1)}, st2, lr=0.1)
    assert y["x"].data[0] == 0.5
    Tr.adam_step(x, {"x": np.zeros(1)}, st, lr=0.1)
    assert np.allclose(st.m["x"], 0.9 * m)
    assert x["x"].data[0] < before[0]        # momentum keeps moving


def test_adam_missing_gradient():
    with pytest.raises(Tr.OptimizerStateError, match="w"):
        Tr.adam_step({"w": Tensor(np.zeros(2))}, {"w": None}, Tr.AdamState(), lr=0.1)


def test_clip_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert Tr.clip_global_norm(g, 1.0) == pytest.approx(5.0)
    assert np.sqrt(g["a"] ** 2 + g["b"] ** 2)[0] == pytest.approx(1.0)


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        Tr.TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        Tr.TrainConfig(batch_size=0)
    with pytest.raises(KeyError, match="lr"):
        Tr.TrainConfig.from_dict({"lr": 1})
    cfg = Tr.TrainConfig.toy(epochs=3)
    assert Tr.TrainConfig.from_dict(cfg.to_dict()) == cfg


# --- freeze discipline ------------------------------------------------------


def test_phases_respect_freeze_contract():
    samples, mcfg, tcfg = small_setup()
    state = Tr.new_state(mcfg, tcfg)
    p = state.params
    batch = D.stack(samples[:4])
    Tr._set_trainable(p, state.generator_names())
    rgb = Tensor(batch["rgb"])
    bundle = Mo.forward_full(p, mcfg, rgb, batch["depth"])

    g_before = snapshot(p, state.generator_names())
    d_before = snapshot(p, state.disc_names())
    Tr.discriminator_phase(state, rgb, bundle.s_r, bundle.s_d)
    assert all(np.array_equal(p[k].data, v) for k, v in g_before.items())
    assert any(not np.array_equal(p[k].data, v) for k, v in d_before.items())

    d_before = snapshot(p, state.disc_names())
    Tr._set_trainable(p, state.generator_names())
    bundle = Mo.forward_full(p, mcfg, rgb, batch["depth"])
    Tr.generator_phase(state, bundle, rgb, batch["gt"], batch["edge_gt"])
    assert all(np.array_equal(p[k].data, v) for k, v in d_before.items())
    assert any(not np.array_equal(p[k].data, v) for k, v in g_before.items())


def test_afl_off_never_touches_discriminator():
    samples, mcfg, tcfg = small_setup(use_afl=False, epochs=1)
    state = Tr.new_state(mcfg, tcfg)
    d_before = snapshot(state.params, state.disc_names())
    Tr.train(samples, state=state)
    assert all(np.array_equal(state.params[k].data, v) for k, v in d_before.items())
    assert all(r["adv_generator"] == 0.0 and r["adv_discriminator"] == 0.0 for r in state.history)


# --- logging, determinism, resume -------------------------------------------


def test_loss_csv_one_row_per_step(tmp_path):
    samples, mcfg, tcfg = small_setup(epochs=1)
    state = Tr.train(samples, tcfg, mcfg, run_dir=tmp_path, val=samples[:2])
    rows = Tr.read_loss_csv(tmp_path / "loss.csv")
    assert len(rows) == state.step == 2
    assert list(rows[0]) == list(Tr.HISTORY_COLUMNS)
    assert [int(r["step"]) for r in rows] == [1, 2]
    assert float(rows[0]["adv_discriminator"]) > 0 and float(rows[0]["edge"]) > 0
    assert (tmp_path / "timing.csv").exists() and (tmp_path / "val.csv").exists()
    assert (tmp_path / "checkpoints" / "epoch_0001.npz").exists()


def test_same_seed_gives_identical_loss_csv(tmp_path):
    for name in ("a", "b"):
        samples, mcfg, tcfg = small_setup(epochs=2)
        Tr.train(samples, tcfg, mcfg, run_dir=tmp_path / name)
    assert (tmp_path / "a" / "loss.csv").read_bytes() == (tmp_path / "b" / "loss.csv").read_bytes()


def test_resume_reproduces_uninterrupted_run(tmp_path):
    samples, mcfg, tcfg = small_setup(epochs=3)
    full = Tr.train(samples, tcfg, mcfg, run_dir=tmp_path / "full")
    state = Tr.load_state(tmp_path / "full" / "checkpoints" / "epoch_0001.npz")
    assert state.epoch == 1 and state.step == 2
    resumed = Tr.train(samples, state=state, run_dir=tmp_path / "resumed")
    assert resumed.history == full.history
    assert all(np.array_equal(full.params[k].data, resumed.params[k].data) for k in full.params)
    assert (tmp_path / "full" / "loss.csv").read_bytes() == (tmp_path / "resumed" / "loss.csv").read_bytes()


def test_max_steps_stops_early():
    samples, mcfg, tcfg = small_setup(epochs=5, max_steps=3)
    assert Tr.train(samples, tcfg, mcfg).step == 3


def test_size_mismatch_rejected():
    samples, mcfg, tcfg = small_setup()
    with pytest.raises(ValueError, match="px"):
        Tr.train(samples, tcfg, Mo.ModelConfig.toy(image_size=24))


# --- edge fine-tune ---------------------------------------------------------


def test_finetune_freezes_streams_and_discriminator(tmp_path):
    samples, mcfg, tcfg = small_setup(epochs=1, edge_finetune_epochs=2)
    state = Tr.train(samples, tcfg, mcfg)
    p = state.params
    frozen = Mo.param_group(p, "stream") + Mo.param_group(p, "disc")
    before = snapshot(p, frozen)
    edge_before = snapshot(p, Mo.param_group(p, "edge"))
    losses = Tr.finetune_edge(state, samples, run_dir=tmp_path)
    assert len(losses) == 2
    assert all(np.array_equal(p[k].data, v) for k, v in before.items())
    assert any(not np.array_equal(p[k].data, v) for k, v in edge_before.items())
    assert (tmp_path / "edge_finetune.csv").exists()


def test_finetune_edge_only_keeps_fusion_head():
    samples, mcfg, tcfg = small_setup(epochs=0, edge_finetune_epochs=1, finetune_fuse=False)
    state = Tr.new_state(mcfg, tcfg)
    fuse = snapshot(state.params, Mo.param_group(state.params, "fuse"))
    Tr.finetune_edge(state, samples)
    assert all(np.array_equal(state.params[k].data, v) for k, v in fuse.items())


def test_finetune_zero_epochs_is_noop():
    samples, mcfg, tcfg = small_setup(epochs=0, edge_finetune_epochs=0)
    state = Tr.new_state(mcfg, tcfg)
    before = snapshot(state.params, list(state.params))
    assert Tr.finetune_edge(state, samples) == []
    assert all(np.array_equal(state.params[k].data, v) for k, v in before.items())


def test_finetune_edge_bce_decreases():
    curves = []
    for seed in (0, 1):
        samples, mcfg, tcfg = small_setup(seed=seed, epochs=0, edge_finetune_epochs=5, augment=False)
        curves.append(Tr.finetune_edge(Tr.new_state(mcfg, tcfg), samples))
    mean = np.mean(curves, axis=0)
    assert np.all(np.diff(mean) < 0), mean
