import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from metasort import network as N

from .oracles import finite_difference_errors, random_problem


def batch(rng, b=4, c=4):
    x = rng.normal(size=(b, 48))
    y = rng.integers(0, c, b)
    tc = np.sort(np.stack([rng.choice(48, 8, replace=False) for _ in range(b)]), axis=1)
    return x, y, tc


def zero_heads(p):
    for k in ("comp.W", "comp.b", "cls.W", "cls.b"):
        p.tensors[k] = np.zeros_like(p[k])
    return p


def test_shallow_mask_partitions(rng):
    p = N.init_params()
    s, d = N.split_params(p)
    assert set(s) | set(d) == set(p.tensors) and not set(s) & set(d)
    assert "enc1.W" in s and p["enc1.W"].shape == (48, 128)
    assert {"comp.W", "cls.W", "enc2.W"} <= set(d)


def test_shapes(rng):
    p = N.init_params(4)
    out = N.forward(p, rng.normal(size=(5, 48)))
    assert out.comp_probs.shape == (5, 8, 48)
    assert out.class_probs.shape == (5, 4)
    assert out.latent.shape == (5, 64)


def test_zero_heads_give_uniform(rng):
    out = N.forward(zero_heads(N.init_params()), rng.normal(size=(3, 48)))
    assert np.allclose(out.comp_probs, 1 / 48, rtol=0, atol=1e-15)
    assert np.allclose(out.class_probs, 0.25)


def test_eval_forward_deterministic(rng):
    p, x = N.init_params(), rng.normal(size=(6, 48))
    a, b = N.forward(p, x), N.forward(p, x)
    assert np.array_equal(a.comp_probs, b.comp_probs) and np.array_equal(a.class_probs, b.class_probs)


def test_train_mode_dropout_needs_rng(rng):
    with pytest.raises(ValueError):
        N.forward(N.init_params(), rng.normal(size=(4, 48)), "train", dropout=0.3)


def test_non_finite_input_rejected():
    x = np.zeros((2, 48))
    x[1, 3] = np.nan
    with pytest.raises(N.NumericError):
        N.forward(N.init_params(), x)
    with pytest.raises(ValueError):
        N.forward(N.init_params(), np.zeros((2, 47)))


@settings(max_examples=300)
@given(arrays(np.float64, (3, 48), elements=st.floats(-100, 100)))
def test_softmax_rows_sum_to_one(z):
    p = N.softmax(z)
    assert np.all(np.abs(p.sum(axis=1) - 1) < 1e-9)
    assert np.all((p >= 0) & (p <= 1))
    assert np.allclose(np.exp(N.log_softmax(z)), p, atol=1e-12)


@given(arrays(np.float64, 4, elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_class_logit_shift_invariance(z, c):
    assert np.allclose(N.softmax(z + c), N.softmax(z), atol=1e-9)
    assert np.argmax(N.softmax(z + c)) == np.argmax(N.softmax(z))


def test_loss_perfect_prediction_is_zero(rng):
    p = zero_heads(N.init_params())
    x, _, _ = batch(rng)
    y = np.full(4, 2)
    tc = np.tile(np.arange(0, 48, 6), (4, 1))
    p.tensors["cls.b"][2] = 1000.0
    cb = p.tensors["comp.b"].reshape(8, 48)
    cb[np.arange(8), tc[0]] = 1000.0
    out = N.forward(p, x)
    assert N.total_loss(out, y, tc, 0.2).total == 0.0
    g = N.backward(p, out, y, tc, 0.2)
    assert all(np.max(np.abs(v)) < 1e-9 for v in g.values())


def test_loss_uniform_class_is_ln4(rng):
    x, y, tc = batch(rng)
    lb = N.total_loss(N.forward(zero_heads(N.init_params()), x), y, tc, 0.2)
    assert lb.class_ce == pytest.approx(math.log(4), abs=1e-12)
    assert lb.comp_ce == pytest.approx(math.log(48), abs=1e-12)


def test_loss_decomposes_in_alpha(rng):
    p = N.init_params(seed=3)
    x, y, tc = batch(rng, 8)
    out = N.forward(p, x)
    base = N.total_loss(out, y, tc, 0.0)
    assert base.total == base.class_ce
    for a in (0.0, 0.2, 1.0):
        assert abs(N.total_loss(out, y, tc, a).total - (base.total + a * base.comp_ce)) <= 1e-12


def test_loss_target_validation(rng):
    out = N.forward(N.init_params(), rng.normal(size=(2, 48)))
    tc = np.zeros((2, 8), dtype=int)
    with pytest.raises(ValueError):
        N.total_loss(out, [0, 4], tc, 0.2)
    with pytest.raises(ValueError):
        N.total_loss(out, [0, 1], tc + 48, 0.2)
    with pytest.raises(ValueError):
        N.total_loss(out, [0, 1], tc[:, :7], 0.2)


def test_gradients_match_finite_differences():
    errs, skipped = finite_difference_errors(*random_problem(11))
    assert max(errs.values()) < 1e-4, errs
    assert skipped < 50


def test_eval_mode_gradients_match_finite_differences(rng):
    p = N.init_params(seed=4)
    p.tensors["bn1.mean"] = rng.normal(0, 0.3, 128)
    p.tensors["bn1.var"] = rng.uniform(0.5, 2, 128)
    x, y, tc = batch(rng, 3)
    g = N.backward(p, N.forward(p, x, "eval"), y, tc, 0.5)
    for k in ("enc1.W", "bn2.gamma", "cls.W"):
        flat = p.tensors[k].reshape(-1)
        for i in rng.choice(flat.size, 10, replace=False):
            o = flat[i]
            flat[i] = o + 1e-5
            lp = N.total_loss(N.forward(p, x, "eval"), y, tc, 0.5).total
            flat[i] = o - 1e-5
            lm = N.total_loss(N.forward(p, x, "eval"), y, tc, 0.5).total
            flat[i] = o
            assert (lp - lm) / 2e-5 == pytest.approx(g[k].reshape(-1)[i], rel=1e-4, abs=1e-8)


def test_shallow_gradient_nonzero_in_joint_training(rng):
    p = N.init_params()
    x, y, tc = batch(rng, 16)
    g = N.backward(p, N.forward(p, x, "train"), y, tc, 0.2)
    assert np.linalg.norm(g["enc1.W"]) > 0


def test_adam_first_step_by_hand():
    p = N.ModelParams({"w": np.array([2.0])}, n_classes=1)
    st_ = N.AdamState({"w": np.zeros(1)}, {"w": np.zeros(1)})
    N.adam_step(p, {"w": np.array([0.3])}, st_, lr=0.01)
    # m = 0.03, v = 9e-5; bias-corrected mhat = 0.3, vhat = 0.09
    assert p["w"][0] == pytest.approx(2.0 - 0.01 * 0.3 / (0.3 + 1e-8), abs=1e-15)
    assert st_.t == 1 and st_.m["w"][0] == pytest.approx(0.03) and st_.v["w"][0] == pytest.approx(9e-5)


def test_adam_update_magnitude_is_lr(rng):
    p = N.init_params()
    before = p.copy()
    # components well above eps so the bias-corrected step is lr to 1e-4
    grads = {k: rng.choice([-1, 1], p[k].shape) * rng.uniform(0.01, 2, p[k].shape) for k in p.trainable()}
    N.adam_step(p, grads, N.AdamState.zeros(p), lr=1e-3)
    for k in grads:
        np.testing.assert_allclose(np.abs(p[k] - before[k]), 1e-3, rtol=1e-4)


def test_adam_zero_gradients_leave_params(rng):
    p = N.init_params()
    before = p.copy()
    N.adam_step(p, {k: np.zeros_like(p[k]) for k in p.trainable()}, N.AdamState.zeros(p), lr=1e-3)
    assert all(np.array_equal(p[k], before[k]) for k in p.tensors)


def test_train_one_epoch(small_ds):
    _, hist = N.train(small_ds, N.TrainConfig(max_epochs=1))
    assert len(hist.rows) == 1 and hist.stopped_at is None
    assert set(hist.rows[0]) == set(N.TrainingHistory.COLUMNS)


def test_train_deterministic(small_ds):
    cfg = N.TrainConfig(max_epochs=3, seed=2)
    (p1, h1), (p2, h2) = N.train(small_ds, cfg), N.train(small_ds, cfg)
    assert h1.rows == h2.rows
    assert all(np.array_equal(p1[k], p2[k]) for k in p1.tensors)


def test_train_learns(trained, small_ds):
    params, hist = trained
    te = small_ds.subset("test")
    assert np.mean(N.predict_labels(params, te.waveforms) == te.labels) > 0.9
    assert hist.rows[-1]["train_loss"] < hist.rows[0]["train_loss"]


def test_train_rejects_empty_split(small_ds):
    import dataclasses

    bad = dataclasses.replace(small_ds, splits=np.full(len(small_ds), "train"))
    with pytest.raises(ValueError):
        N.train(bad, N.TrainConfig(max_epochs=1))
    with pytest.raises(ValueError):
        N.TrainConfig(alpha=-1).validate()


def scripted(losses):
    return lambda epoch, params: losses[epoch - 1] if epoch <= len(losses) else losses[-1]


def test_lr_halves_once_after_plateau(small_ds):
    # improve, plateau for exactly 10 epochs, then keep improving
    losses = [1.0] + [1.0] * 10 + [0.9 - 0.01 * i for i in range(10)]
    cfg = N.TrainConfig(max_epochs=len(losses), lr_initial=1e-3)
    _, hist = N.train(small_ds, cfg, val_loss_fn=scripted(losses))
    assert hist.halved_at == [11]
    lrs = [r["lr"] for r in hist.rows]
    assert lrs[:11] == [1e-3] * 11 and all(lr == 5e-4 for lr in lrs[11:])


def test_sub_threshold_improvement_counts_as_plateau(small_ds):
    losses = [1.0] + [1.0 - 5e-5 * (i % 2) for i in range(1, 11)] + [0.5]
    _, hist = N.train(small_ds, N.TrainConfig(max_epochs=len(losses)), val_loss_fn=scripted(losses))
    assert hist.halved_at == [11]


def test_monitor_counts():
    m = N.PlateauMonitor(lr_patience=3, stop_patience=5)
    seq = [m.update(e, v) for e, v in enumerate([1.0, 1.0, 1.0, 1.0, 1.0, 1.0], 1)]
    assert seq[0] == (True, False, False)
    assert [s[1] for s in seq] == [False, False, False, True, False, False]
    assert seq[5][2] is True


def test_predict_compress_one_hot(rng):
    p = zero_heads(N.init_params())
    want = np.array([2, 5, 9, 17, 23, 30, 41, 46])
    cb = p.tensors["comp.b"].reshape(8, 48)
    cb[np.arange(8), want[::-1]] = 50.0  # slot order need not be sorted
    x = rng.normal(size=48)
    c = N.predict_compress(p, x)
    assert c.indices.tolist() == want.tolist() and np.array_equal(c.values, x[want])


def test_greedy_collision_fallback():
    probs = np.full((8, 48), 1e-3)
    for j in range(8):
        probs[j, 3 * j + 4] = 0.5
    probs[1] = probs[0].copy()
    probs[1, 11] = 0.3  # the second slot's runner-up
    out = N.greedy_indices(probs).tolist()
    assert 4 in out and 11 in out and len(set(out)) == 8


def test_predict_compress_always_eight_distinct():
    rng = np.random.default_rng(0)
    x = rng.normal(size=48)
    base = N.init_params()
    for i in range(1000):
        p = base.copy()
        p.tensors["comp.W"] = rng.normal(0, 3, p["comp.W"].shape)
        p.tensors["comp.b"] = rng.normal(0, 3, p["comp.b"].shape)
        idx = N.predict_compress(p, x).indices
        assert len(idx) == 8 and np.all(np.diff(idx) > 0)


def test_predict_class():
    p = zero_heads(N.init_params())
    x = np.linspace(-1, 1, 48)
    assert N.predict_class(p, x)[0] == 0
    p.tensors["cls.b"] = np.log([0.1, 0.7, 0.1, 0.1])
    label, probs = N.predict_class(p, x)
    assert label == 1 and np.allclose(probs, [0.1, 0.7, 0.1, 0.1])
    p.tensors["cls.b"] = p["cls.b"] + 25.0
    assert N.predict_class(p, x)[0] == 1


def test_checkpoint_round_trip_is_lossless(tmp_path, trained):
    params, hist = trained
    N.save_params(params, tmp_path / "model.json")
    back = N.load_params(tmp_path / "model.json")
    assert all(params[k].tobytes() == back[k].tobytes() for k in params.tensors)
    N.save_params(back, tmp_path / "again.json")
    assert (tmp_path / "model.json").read_bytes() == (tmp_path / "again.json").read_bytes()
    d = json.loads((tmp_path / "model.json").read_text())
    assert d["optimizer"] == {"name": "adam", "beta1": 0.9, "beta2": 0.999, "eps": 1e-8}
    assert {layer["group"] for layer in d["layers"]} == {"shallow", "deep"}
    hist.write_csv(tmp_path / "history.csv")
    lines = (tmp_path / "history.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,val_class_acc,val_comp_acc,lr"
    assert len(lines) == 1 + len(hist.rows)


def test_checkpoint_version_mismatch(tmp_path):
    d = N.params_to_dict(N.init_params())
    d["version"] = 99
    (tmp_path / "m.json").write_text(json.dumps(d))
    with pytest.raises(N.CheckpointFormatError, match="version"):
        N.load_params(tmp_path / "m.json")
