"""Synthetic spike datasets with controllable template similarity and noise.

Templates are sums of Gaussian lobes (a difference-of-Gaussians trough plus
repolarization / pre-potential lobes). Each combination has a common base
shape and three class-specific shapes; the three templates are mixtures of
base and class shape, with the mixing weight solved by bisection so that the
largest pairwise zero-lag normalized cross-correlation hits the target
similarity of that combination.
"""

from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .preprocess import align_and_crop, detect_peak
from .seeding import derive_seed, make_rng

RAW_LEN = 64
TROUGH_AT = 20
N_NEURONS = 3
CLASS_NAMES = ("neuron_0", "neuron_1", "neuron_2", "artefact")
SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.70, 0.15, 0.15)

NOISE_SCHEDULE = (0.05, 0.1, 0.15, 0.2)
COMB_LABELS = ("a", "b", "c", "d")
SIMILARITY_TARGETS = {1: 0.50, 2: 0.65, 3: 0.80, 4: 0.90}

# Lobe tuples: (amplitude, offset from trough, width). Negative amplitude is a
# downward deflection.
_BASE_SHAPES = {
    1: [(-1.0, 0, 6.0), (0.60, 16, 10.0)],
    2: [(-1.0, 0, 5.0), (0.55, 14, 12.0), (-0.20, -12, 5.0)],
    3: [(-1.0, 0, 7.0), (0.65, 18, 10.0)],
    4: [(-1.0, 0, 5.5), (0.55, 15, 12.0), (0.15, -12, 5.0)],
}
_CLASS_SHAPES = {
    1: [
        [(-1.0, 0, 7.1), (0.69, 24, 7.2)],
        [(-1.0, 0, 4.0), (0.66, 10, 8.0), (0.48, -8, 3.1)],
        [(1.0, 0, 6.4), (-0.40, 20, 7.9), (-0.34, -11, 5.4)],
    ],
    2: [
        [(-1.0, 0, 4.2), (0.65, 10, 9.3), (0.20, -11, 5.3)],
        [(-1.0, 0, 9.0), (0.66, 24, 12.7)],
        [(1.0, 0, 7.3), (-0.59, 16, 11.8), (-0.47, -10, 5.0)],
    ],
    3: [
        [(-1.0, 0, 5.8), (0.69, 10, 8.0), (0.38, -9, 5.1)],
        [(-1.0, 0, 8.1), (0.67, 20, 11.8)],
        [(1.0, 0, 7.6), (-0.69, 20, 12.1), (-0.39, -8, 3.6)],
    ],
    4: [
        [(-1.0, 0, 4.2), (0.28, 12, 13.2), (0.42, -12, 3.6)],
        [(-1.0, 0, 6.1), (0.63, 10, 10.4)],
        [(-1.0, 0, 8.6), (0.44, 21, 11.2), (0.32, -12, 5.9)],
    ],
}


class GenerationError(ValueError):
    """Invalid generator argument."""


@dataclass(frozen=True)
class TemplateSet:
    comb_id: int
    templates: np.ndarray  # (3, 64)
    similarity_index: float
    target_similarity: float
    mix: float


@dataclass(frozen=True)
class GenConfig:
    comb_id: int = 1
    noise_sigma: float = 0.05
    n_spikes_per_class: int = 100
    artefact_rate: float = 0.25
    seed: int = 0
    template_seed: int = 0
    jitter: int = 3
    amplitude_jitter: float = 0.1

    def validate(self) -> None:
        if self.comb_id not in SIMILARITY_TARGETS:
            raise GenerationError(f"comb_id must be in 1..4, got {self.comb_id}")
        if not self.noise_sigma >= 0:
            raise GenerationError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.n_spikes_per_class < 1:
            raise GenerationError("n_spikes_per_class must be >= 1")
        if not 0.0 <= self.artefact_rate < 1.0:
            raise GenerationError("artefact_rate must be in [0, 1)")
        if self.jitter < 0 or not 0.0 <= self.amplitude_jitter < 1.0:
            raise GenerationError("jitter must be >= 0 and amplitude_jitter in [0, 1)")

    @property
    def label(self) -> str:
        return f"Comb{self.comb_id}{COMB_LABELS[self.comb_id - 1]}/sigma={self.noise_sigma:g}"


@dataclass
class LabelledDataset:
    waveforms: np.ndarray  # (n, L) float64
    labels: np.ndarray  # (n,) int64
    splits: np.ndarray  # (n,) unicode split tags
    class_names: tuple[str, ...] = CLASS_NAMES
    config: dict = field(default_factory=dict)
    preprocessed: bool = False

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def subset(self, split: str) -> "LabelledDataset":
        m = self.splits == split
        return dataclasses.replace(
            self, waveforms=self.waveforms[m], labels=self.labels[m], splits=self.splits[m]
        )

    def counts(self) -> dict[str, dict[str, int]]:
        out = {}
        for s in SPLITS:
            m = self.splits == s
            out[s] = {name: int(np.sum(self.labels[m] == c)) for c, name in enumerate(self.class_names)}
        return out


def pairwise_similarity(templates: np.ndarray) -> np.ndarray:
    """Zero-lag normalized cross-correlation matrix (Pearson) of the rows."""
    z = templates - templates.mean(axis=1, keepdims=True)
    z = z / np.linalg.norm(z, axis=1, keepdims=True)
    return z @ z.T


def similarity_index(templates: np.ndarray) -> float:
    c = pairwise_similarity(templates)
    iu = np.triu_indices(len(templates), k=1)
    return float(np.max(c[iu]))


def _render(lobes, jitter_rng=None) -> np.ndarray:
    n = np.arange(RAW_LEN, dtype=np.float64)
    out = np.zeros(RAW_LEN)
    for amp, off, width in lobes:
        if jitter_rng is not None:
            amp *= 1.0 + jitter_rng.uniform(-0.05, 0.05)
            width *= 1.0 + jitter_rng.uniform(-0.05, 0.05)
        out += amp * np.exp(-0.5 * ((n - TROUGH_AT - off) / width) ** 2)
    return out


def _peak_normalize(w: np.ndarray) -> np.ndarray:
    return w / np.max(np.abs(w))


def _mixture(base, shapes, lam) -> np.ndarray:
    return np.stack([_peak_normalize((1.0 - lam) * base + lam * s) for s in shapes])


def make_templates(comb_id: int, seed: int = 0) -> TemplateSet:
    """Build the three templates of template combination ``comb_id`` (1..4)."""
    if comb_id not in SIMILARITY_TARGETS:
        raise GenerationError(f"comb_id must be in 1..4, got {comb_id}")
    rng = make_rng(derive_seed(seed, "templates", comb_id))
    base = _peak_normalize(_render(_BASE_SHAPES[comb_id], rng))
    shapes = [_peak_normalize(_render(lobes, rng)) for lobes in _CLASS_SHAPES[comb_id]]
    target = SIMILARITY_TARGETS[comb_id]

    # similarity is 1 at lam=0 and decreases towards the pure class shapes
    lo, hi = 0.0, 1.0
    if similarity_index(_mixture(base, shapes, hi)) > target:
        raise GenerationError(f"class shapes of comb {comb_id} cannot reach similarity {target}")
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if similarity_index(_mixture(base, shapes, mid)) > target:
            lo = mid
        else:
            hi = mid
    templates = _mixture(base, shapes, hi)
    return TemplateSet(comb_id, templates, similarity_index(templates), target, hi)


def _shift(w: np.ndarray, k: int) -> np.ndarray:
    # positive k delays the waveform; vacated samples replicate the edge
    if k == 0:
        return w.copy()
    out = np.empty_like(w)
    if k > 0:
        out[k:] = w[:-k]
        out[:k] = w[0]
    else:
        out[:k] = w[-k:]
        out[k:] = w[-1]
    return out


def _artefact(rng: np.random.Generator) -> np.ndarray:
    burst = gaussian_filter1d(rng.standard_normal(RAW_LEN), sigma=1.5)
    n = np.arange(RAW_LEN)
    centre = rng.uniform(16, 44)
    burst *= np.exp(-0.5 * ((n - centre) / rng.uniform(5.0, 10.0)) ** 2)
    return _peak_normalize(burst) * rng.uniform(0.8, 1.2)


def n_artefacts(cfg: GenConfig) -> int:
    # artefact_rate is the artefact share of the whole dataset
    n_neuron = N_NEURONS * cfg.n_spikes_per_class
    return int(round(cfg.artefact_rate * n_neuron / (1.0 - cfg.artefact_rate)))


def _split_tags(n: int, rng: np.random.Generator) -> np.ndarray:
    n_train = int(round(SPLIT_FRACTIONS[0] * n))
    n_val = int(round(SPLIT_FRACTIONS[1] * n))
    tags = np.array(["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val))
    return tags[rng.permutation(n)]


def window_scale(w: np.ndarray) -> float:
    """Std of the aligned 48-sample window: one unit of normalized amplitude."""
    return float(np.std(align_and_crop(w, detect_peak(w))))


def generate_dataset(cfg: GenConfig, templates: TemplateSet | None = None) -> LabelledDataset:
    """Generate a labelled 64-sample spike dataset with 70/15/15 split tags.

    ``noise_sigma`` is in normalized (z-scored) amplitude units: the noise std
    added to a waveform is ``noise_sigma`` times the std of its aligned window.
    """
    cfg.validate()
    if templates is None:
        templates = make_templates(cfg.comb_id, cfg.template_seed)
    rng = make_rng(derive_seed(cfg.seed, "dataset"))
    n = cfg.n_spikes_per_class

    waves, labels, splits = [], [], []
    for c in range(N_NEURONS):
        t = templates.templates[c]
        unit = window_scale(t)
        for _ in range(n):
            k = int(rng.integers(-cfg.jitter, cfg.jitter + 1)) if cfg.jitter else 0
            a = rng.uniform(1.0 - cfg.amplitude_jitter, 1.0 + cfg.amplitude_jitter) if cfg.amplitude_jitter else 1.0
            w = a * _shift(t, k)
            if cfg.noise_sigma > 0:
                w = w + rng.normal(0.0, cfg.noise_sigma * a * unit, RAW_LEN)
            waves.append(w)
        labels += [c] * n
        splits.append(_split_tags(n, rng))

    n_art = n_artefacts(cfg)
    class_names = CLASS_NAMES if cfg.artefact_rate > 0 else CLASS_NAMES[:N_NEURONS]
    if n_art:
        for _ in range(n_art):
            w = _artefact(rng)
            if cfg.noise_sigma > 0:
                w = w + rng.normal(0.0, cfg.noise_sigma * window_scale(w), RAW_LEN)
            waves.append(w)
        labels += [N_NEURONS] * n_art
        splits.append(_split_tags(n_art, rng))

    order = rng.permutation(len(labels))
    return LabelledDataset(
        waveforms=np.asarray(waves)[order],
        labels=np.asarray(labels, dtype=np.int64)[order],
        splits=np.concatenate(splits)[order],
        class_names=class_names,
        config=dataclasses.asdict(cfg),
    )


def combination_schedule(
    n_spikes_per_class: int = 100, seed: int = 0, sigmas=NOISE_SCHEDULE
) -> list[GenConfig]:
    """The 16 (combination, noise) settings of the dynamic test, comb-major."""
    out = []
    for i, (comb, sigma) in enumerate(itertools.product(range(1, 5), sigmas)):
        out.append(
            GenConfig(
                comb_id=comb,
                noise_sigma=float(sigma),
                n_spikes_per_class=n_spikes_per_class,
                seed=derive_seed(seed, "schedule", i),
            )
        )
    return out


# --- serialization ---------------------------------------------------------

FORMAT_NAME = "metasort-dataset"
FORMAT_VERSION = 1


def save_dataset(ds: LabelledDataset, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "config": ds.config,
        "seed": ds.config.get("seed"),
        "class_names": list(ds.class_names),
        "counts": ds.counts(),
        "n_spikes": len(ds),
        "n_samples": int(ds.waveforms.shape[1]),
        "preprocessed": bool(ds.preprocessed),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    n_samples = ds.waveforms.shape[1]
    with open(os.path.join(out_dir, "spikes.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split_tag", "label"] + [f"s{i}" for i in range(n_samples)])
        for tag, lab, row in zip(ds.splits, ds.labels, ds.waveforms):
            w.writerow([tag, int(lab)] + [f"{v:.9g}" for v in row])


def load_dataset(path: str) -> LabelledDataset:
    mpath = os.path.join(path, "manifest.json")
    with open(mpath, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != FORMAT_NAME or manifest.get("version") != FORMAT_VERSION:
        raise ValueError(f"{mpath}: unsupported dataset format")
    tags, labels, rows = [], [], []
    with open(os.path.join(path, "spikes.csv"), encoding="utf-8", newline="") as fh:
        r = csv.reader(fh)
        next(r)
        for rec in r:
            tags.append(rec[0])
            labels.append(int(rec[1]))
            rows.append([float(v) for v in rec[2:]])
    n_samples = manifest["n_samples"]
    return LabelledDataset(
        waveforms=np.asarray(rows, dtype=np.float64).reshape(-1, n_samples),
        labels=np.asarray(labels, dtype=np.int64),
        splits=np.asarray(tags),
        class_names=tuple(manifest["class_names"]),
        config=manifest["config"],
        preprocessed=manifest["preprocessed"],
    )
