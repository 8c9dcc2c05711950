"""Acceptance criteria, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL ...`` line with the
measured value next to its threshold, and enforces the stated runtime bound.
"""

import filecmp
import json
import os
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metasort import cli, evaluation, meta, network, sampler
from metasort.preprocess import preprocess_dataset
from metasort.spikegen import GenConfig, combination_schedule, generate_dataset

from .oracles import finite_difference_errors, random_problem


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
    return ok


@pytest.fixture(scope="module")
def full_runs(tmp_path_factory):
    """Two independent ``evaluate --full`` runs with the same master seed."""
    root = tmp_path_factory.mktemp("full")
    times = []
    for name in ("run1", "run2"):
        t0 = time.perf_counter()
        code = cli.main(["evaluate", "--full", "--seed", "0", "--out", str(root / name), "--quiet"])
        times.append(time.perf_counter() - t0)
        assert code == 0
    return root / "run1", root / "run2", times


# 1 ---------------------------------------------------------------------------


def test_criterion_1_compression_ratio(capsys):
    t0 = time.perf_counter()
    spikes = []
    for cfg in combination_schedule(n_spikes_per_class=160, seed=101):
        spikes.append(preprocess_dataset(generate_dataset(cfg)).waveforms)
    x = np.concatenate(spikes)
    rng = np.random.default_rng(5)
    noise = rng.normal(size=(2000, 48))
    x = np.concatenate([x, (noise - noise.mean(1, keepdims=True)) / noise.std(1, keepdims=True)])
    idx = sampler.compress_indices(x)
    distinct = np.all(np.diff(idx, axis=1) > 0) and idx.min() >= 0 and idx.max() <= 47
    ratios = {48 / len(set(r)) for r in idx.tolist()}
    elapsed = time.perf_counter() - t0
    ok = len(x) >= 10_000 and idx.shape[1] == 8 and distinct and ratios == {6.0} and elapsed < 10
    assert verdict(capsys, 1, ok, f"{len(x)} spikes, ratios={sorted(ratios)}, {elapsed:.1f}s (<10s)")


# 2 ---------------------------------------------------------------------------


def test_criterion_2_compression_fidelity(capsys):
    t0 = time.perf_counter()
    rep = evaluation.run_compression_study(evaluation.compression_dataset(500, comb_id=1, noise_sigma=0.05))
    elapsed = time.perf_counter() - t0
    ok = rep.n_spikes == 500 and rep.mean_rmse <= 0.10 and rep.mean_rmse < rep.baseline_mean_rmse and elapsed < 30
    assert verdict(capsys, 2, ok, f"mean RMSE {rep.mean_rmse:.4f} (<=0.10), uniform {rep.baseline_mean_rmse:.4f}, {elapsed:.1f}s (<30s)")


# 3 ---------------------------------------------------------------------------


def test_criterion_3_dynamic_gap(capsys, full_runs):
    run1, _, times = full_runs
    s = json.loads((run1 / "summary.json").read_text())
    gap = s["median_cacc_B"] - s["median_cacc_A"]
    ok = gap >= 0.15 and s["median_cacc_B"] >= 0.85 and times[0] < 20 * 60
    detail = f"median A {s['median_cacc_A']:.4f}, B {s['median_cacc_B']:.4f}, gap {gap:.4f} (>=0.15, B>=0.85), {times[0]:.0f}s (<1200s)"
    assert verdict(capsys, 3, ok, detail)


def test_criterion_3_in_distribution_parity(full_runs):
    run1, _, _ = full_runs
    d = json.loads((run1 / "dynamic_test.json").read_text())
    recs = [r for r in d["records"] if r["comb_id"] == 1 and r["noise_sigma"] == 0.05]
    a = next(r["cacc"] for r in recs if r["model"] == "A")
    b = next(r["cacc"] for r in recs if r["model"] == "B")
    assert abs(a - b) <= 0.05


# 4 ---------------------------------------------------------------------------


def test_criterion_4_gradient_oracle(capsys):
    t0 = time.perf_counter()
    worst, skipped = {}, 0
    for seed in (0, 1, 2):
        errs, sk = finite_difference_errors(*random_problem(seed))
        skipped += sk
        for k, e in errs.items():
            worst[k] = max(worst.get(k, 0.0), e)
    elapsed = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    ok = max(worst.values()) < 1e-4 and len(worst) == len(network.init_params().trainable()) and elapsed < 60
    detail = f"max rel err {worst[top]:.2e} ({top}) over {len(worst)} tensors x 3 seeds, {skipped} kink components skipped, {elapsed:.1f}s (<60s)"
    assert verdict(capsys, 4, ok, detail)


# 5 ---------------------------------------------------------------------------

_SOFTMAX_WORST = [0.0]


def _logits(seed, mode, shape):
    rng = np.random.default_rng(seed)
    if mode == "normal":
        return rng.normal(0, 10, shape)
    if mode == "extreme":
        return rng.choice([-100.0, 100.0], shape)
    if mode == "mixed":
        z = rng.uniform(-100, 100, shape)
        z[rng.random(shape) < 0.3] = 100.0
        return z
    if mode == "spike":
        z = np.full(shape, -100.0)
        z[..., rng.integers(shape[-1])] = 100.0  # same hot index in every slot
        return z
    return np.full(shape, rng.uniform(-100, 100))


@settings(max_examples=10_000, deadline=None, derandomize=True)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["normal", "extreme", "mixed", "spike", "constant"]))
def _softmax_property(seed, mode):
    p = network.init_params(4)
    for k in ("comp.W", "cls.W"):
        p.tensors[k] = np.zeros_like(p[k])
    p.tensors["comp.b"] = _logits(seed, mode, (8, 48)).ravel()
    p.tensors["cls.b"] = _logits(seed + 1, mode, (4,))
    out = network.forward(p, np.zeros((1, 48)) + np.linspace(-1, 1, 48))
    for probs in (out.comp_probs[0], out.class_probs):
        assert np.all((probs >= 0) & (probs <= 1))
        err = float(np.max(np.abs(probs.sum(axis=-1) - 1)))
        _SOFTMAX_WORST[0] = max(_SOFTMAX_WORST[0], err)
        assert err <= 1e-9


def test_criterion_5_probability_invariants(capsys):
    ok = True
    try:
        _softmax_property()
    except AssertionError:
        ok = False
    assert verdict(capsys, 5, ok, f"10000 cases, max |sum-1| = {_SOFTMAX_WORST[0]:.1e} (<=1e-9)")


# 6 ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def base_model():
    ds = preprocess_dataset(generate_dataset(GenConfig(n_spikes_per_class=80, seed=31)))
    return network.train(ds, network.TrainConfig(max_epochs=30, seed=31))[0]


def test_criterion_6_freeze_invariant(capsys, base_model):
    pools = [preprocess_dataset(generate_dataset(c)) for c in combination_schedule(n_spikes_per_class=20, seed=77)]
    policy = evaluation.AdaptPolicy()
    frozen_ok = identity_ok = True
    for e in range(100):
        ep = meta.sample_episode(pools[e % 16], seed=1000 + e)
        shallow_before, _ = network.split_params(base_model)
        shallow_before = {k: v.tobytes() for k, v in shallow_before.items()}
        adapted = meta.adapt(base_model, ep.support_x, ep.support_y, policy.adapt_config())
        shallow_after, _ = network.split_params(adapted)
        frozen_ok &= all(shallow_after[k].tobytes() == shallow_before[k] for k in shallow_before)
        same = meta.adapt(base_model, ep.support_x, ep.support_y, meta.AdaptConfig(steps=0))
        identity_ok &= all(same[k].tobytes() == base_model[k].tobytes() for k in base_model.tensors)
    assert verdict(capsys, 6, frozen_ok and identity_ok,
                   f"100 episodes, theta_s bit-identical={frozen_ok}, steps=0 identity={identity_ok}")


# 7 ---------------------------------------------------------------------------


def test_criterion_7_training_protocol(capsys):
    ds = preprocess_dataset(generate_dataset(GenConfig(n_spikes_per_class=20, seed=3)))
    # improves through epoch 5, then never again
    losses = [1.0, 0.9, 0.8, 0.7, 0.6]
    snapshots = {}

    def scripted(epoch, params):
        return losses[epoch - 1] if epoch <= len(losses) else 0.6

    def keep(epoch, params):
        snapshots[epoch] = params.copy()

    cfg = network.TrainConfig(max_epochs=300, lr_initial=1e-3, lr_halving_patience=10, early_stop_patience=20)
    params, hist = network.train(ds, cfg, val_loss_fn=scripted, on_epoch=keep)
    lrs = {r["epoch"]: r["lr"] for r in hist.rows}
    restored = all(params[k].tobytes() == snapshots[5][k].tobytes() for k in params.tensors)
    ok = (
        hist.halved_at == [15]
        and lrs[15] == 1e-3
        and lrs[16] == 5e-4
        and hist.stopped_at == 25
        and len(hist.rows) == 25
        and hist.best_epoch == 5
        and restored
    )
    detail = f"halved at {hist.halved_at} (want [15]), stopped at {hist.stopped_at} (want 25 = 5 + 20), best restored={restored}"
    assert verdict(capsys, 7, ok, detail)


# 8 ---------------------------------------------------------------------------


def test_criterion_8_determinism(capsys, full_runs):
    run1, run2, _ = full_runs
    files = sorted(os.path.relpath(os.path.join(d, f), run1) for d, _, fs in os.walk(run1) for f in fs)
    other = sorted(os.path.relpath(os.path.join(d, f), run2) for d, _, fs in os.walk(run2) for f in fs)
    same = files == other and all(filecmp.cmp(run1 / f, run2 / f, shallow=False) for f in files)
    expected = {"summary.json", "dynamic_test.csv", "dynamic_test.json", "compression.csv",
                os.path.join("plotdata", "fig6.csv"), os.path.join("plotdata", "fig7.csv")}
    ok = same and expected <= set(files)
    assert verdict(capsys, 8, ok, f"{len(files)} report files byte-identical across two runs: {same}")


# 9 ---------------------------------------------------------------------------


def test_criterion_9_geometry_oracle(capsys):
    rng = np.random.default_rng(9)
    i = np.arange(48.0)
    worst = 0.0
    for _ in range(2000):
        deg = rng.integers(0, 3)
        a, b, c = rng.uniform(-3, 3), rng.uniform(-2, 2) * (deg >= 1), rng.uniform(-0.5, 0.5) * (deg == 2)
        g = sampler.compute_geometry(a + b * i + c * i**2)
        closed = 2 * c / (1 + (b + 2 * c * i) ** 2) ** 1.5
        worst = max(worst, float(np.max(np.abs(g.curvature[1:-1] - closed[1:-1]))))
    grid = np.linspace(-2, 2, 401)
    grid = np.union1d(grid, [-0.7, 0.7, np.nextafter(0.7, 1), np.nextafter(-0.7, -1)])
    k, s = (m.ravel() for m in np.meshgrid(grid, grid))
    res = sampler.resolution_profile(sampler.GeometryProfile(s, k)).res
    dense_ok = bool(np.all(res[np.abs(k) > 0.7] == 3) and np.all(res[np.abs(k) <= 0.7] != 3))
    ok = worst <= 1e-6 and dense_ok
    assert verdict(capsys, 9, ok, f"max |k - closed form| {worst:.1e} (<=1e-6), RES=3 exactly where |k|>0.7 on {len(k)} profiles: {dense_ok}")
