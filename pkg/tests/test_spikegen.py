import itertools

import numpy as np
import pytest

from metasort import spikegen as sg
from metasort.preprocess import align_and_crop, detect_peak


@pytest.mark.parametrize("comb", [1, 2, 3, 4])
def test_templates_normalized_and_on_target(comb):
    ts = sg.make_templates(comb)
    assert ts.templates.shape == (3, sg.RAW_LEN)
    np.testing.assert_allclose(np.max(np.abs(ts.templates), axis=1), 1.0, atol=1e-9)
    # measure independently of the stored value
    c = np.corrcoef(ts.templates)
    measured = max(c[i, j] for i, j in itertools.combinations(range(3), 2))
    assert abs(measured - sg.SIMILARITY_TARGETS[comb]) <= 0.05
    assert ts.similarity_index == pytest.approx(measured, abs=1e-12)


def test_templates_deterministic():
    a, b = sg.make_templates(1, 0), sg.make_templates(1, 0)
    assert np.array_equal(a.templates, b.templates)
    assert not np.array_equal(a.templates, sg.make_templates(1, 5).templates)


def test_similarity_monotone_across_combinations():
    s = [sg.make_templates(c).similarity_index for c in (1, 2, 3, 4)]
    assert s == sorted(s) and len(set(s)) == 4


def test_templates_survive_cropping():
    # the trough stays near the raw anchor, so the 48-sample window keeps the spike
    for comb in (1, 2, 3, 4):
        for t in sg.make_templates(comb).templates:
            p = detect_peak(t)
            assert abs(p - sg.TROUGH_AT) <= 2
            assert len(align_and_crop(t, p)) == 48


def test_bad_comb_rejected():
    with pytest.raises(sg.GenerationError):
        sg.make_templates(5)
    with pytest.raises(ValueError):
        sg.generate_dataset(sg.GenConfig(noise_sigma=-0.1))


def test_zero_noise_spikes_equal_templates():
    cfg = sg.GenConfig(noise_sigma=0.0, jitter=0, amplitude_jitter=0.0, n_spikes_per_class=10, artefact_rate=0.0)
    ds = sg.generate_dataset(cfg)
    ts = sg.make_templates(1).templates
    for w, y in zip(ds.waveforms, ds.labels):
        assert np.array_equal(w, ts[y])


def test_noise_level_in_normalized_units():
    cfg = sg.GenConfig(noise_sigma=0.05, jitter=0, amplitude_jitter=0.0, n_spikes_per_class=400, artefact_rate=0.0)
    ds = sg.generate_dataset(cfg)
    ts = sg.make_templates(1).templates
    unit = np.array([sg.window_scale(t) for t in ts])
    dev = (ds.waveforms - ts[ds.labels]) / unit[ds.labels, None]
    assert np.std(dev) == pytest.approx(0.05, rel=0.10)


def test_split_sizes_per_class():
    ds = sg.generate_dataset(sg.GenConfig(n_spikes_per_class=100))
    assert ds.n_classes == 4
    counts = ds.counts()
    for name in ds.class_names:
        assert (counts["train"][name], counts["val"][name], counts["test"][name]) == (70, 15, 15)


def test_generate_deterministic():
    a = sg.generate_dataset(sg.GenConfig(seed=3, n_spikes_per_class=20))
    b = sg.generate_dataset(sg.GenConfig(seed=3, n_spikes_per_class=20))
    assert np.array_equal(a.waveforms, b.waveforms) and np.array_equal(a.labels, b.labels)
    assert np.array_equal(a.splits, b.splits)


def test_labels_follow_generators():
    cfg = sg.GenConfig(noise_sigma=0.0, n_spikes_per_class=30, seed=2)
    ds = sg.generate_dataset(cfg)
    ts = sg.make_templates(1).templates
    for w, y in zip(ds.waveforms, ds.labels):
        if y < 3:
            # best-matching template (over jitter shifts) is the labelled one
            scores = [max(np.corrcoef(w, np.roll(t, k))[0, 1] for k in range(-3, 4)) for t in ts]
            assert int(np.argmax(scores)) == y


def test_schedule():
    s = sg.combination_schedule()
    assert len(s) == 16
    assert (s[0].comb_id, s[0].noise_sigma) == (1, 0.05)
    assert len({(c.comb_id, c.noise_sigma) for c in s}) == 16
    assert [c.comb_id for c in s[:4]] == [1, 1, 1, 1]
    assert [c.noise_sigma for c in s[:4]] == [0.05, 0.1, 0.15, 0.2]


def test_save_load_round_trip(tmp_path):
    ds = sg.generate_dataset(sg.GenConfig(n_spikes_per_class=5, seed=9))
    sg.save_dataset(ds, tmp_path / "d")
    back = sg.load_dataset(tmp_path / "d")
    np.testing.assert_allclose(back.waveforms, ds.waveforms, rtol=1e-8, atol=1e-12)
    assert np.array_equal(back.labels, ds.labels)
    assert list(back.splits) == list(ds.splits)
    first = (tmp_path / "d" / "spikes.csv").read_text().splitlines()[0].split(",")
    assert first[:3] == ["split_tag", "label", "s0"] and len(first) == 2 + 64


def test_load_rejects_other_format(tmp_path):
    (tmp_path / "manifest.json").write_text('{"format": "x", "version": 1}')
    with pytest.raises(ValueError):
        sg.load_dataset(tmp_path)
