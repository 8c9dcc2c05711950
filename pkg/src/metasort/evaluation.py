"""Compression-fidelity study, static-vs-adaptive dynamic test, and report files."""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import meta, network, sampler
from .preprocess import preprocess_dataset
from .seeding import derive_seed
from .spikegen import COMB_LABELS, GenConfig, combination_schedule, generate_dataset

N_COMBINATIONS = 16
MODELS = ("A", "B")


def cacc(predicted, truth) -> float:
    """Fraction of spikes assigned to their true class."""
    p = np.asarray(predicted)
    t = np.asarray(truth)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("cannot score an empty assignment")
    return float(np.mean(p == t))


def median(values) -> float:
    return float(np.median(np.asarray(values, dtype=np.float64)))


# --- compression -------------------------------------------------------------


@dataclass
class CompressionReport:
    n_spikes: int
    mean_rmse: float
    rmse: np.ndarray
    compression_ratio: float
    baseline_mean_rmse: float
    baseline_rmse: np.ndarray
    indices: np.ndarray
    originals: np.ndarray = field(repr=False)
    reconstructions: np.ndarray = field(repr=False)

    def summary(self) -> dict:
        return {
            "n_spikes": self.n_spikes,
            "mean_rmse": self.mean_rmse,
            "baseline_mean_rmse": self.baseline_mean_rmse,
            "compression_ratio": self.compression_ratio,
        }


def compression_dataset(n_spikes: int = 500, comb_id: int = 1, noise_sigma: float = 0.05, seed: int = 0) -> np.ndarray:
    """``n_spikes`` preprocessed neuron spikes (no artefact bursts) from one combination."""
    per_class = -(-n_spikes // 3) + 1
    cfg = GenConfig(comb_id=comb_id, noise_sigma=noise_sigma, n_spikes_per_class=per_class,
                    artefact_rate=0.0, seed=derive_seed(seed, "compression"))
    ds = preprocess_dataset(generate_dataset(cfg))
    return ds.waveforms[:n_spikes]


def run_compression_study(x, cfg: sampler.SamplerConfig = sampler.SamplerConfig()) -> CompressionReport:
    x = np.asarray(getattr(x, "waveforms", x), dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("expected a non-empty (n, 48) array of preprocessed spikes")
    idx = sampler.compress_indices(x, cfg)
    rec = sampler.reconstruct_batch(idx, x)
    err = sampler.rmse_rows(x, rec)
    uni = np.tile(sampler.uniform_indices(x.shape[1], cfg.n_keep), (len(x), 1))
    base = sampler.rmse_rows(x, sampler.reconstruct_batch(uni, x))
    return CompressionReport(
        n_spikes=len(x),
        mean_rmse=float(err.mean()),
        rmse=err,
        compression_ratio=x.shape[1] / idx.shape[1],
        baseline_mean_rmse=float(base.mean()),
        baseline_rmse=base,
        indices=idx,
        originals=x,
        reconstructions=rec,
    )


# --- dynamic test ------------------------------------------------------------


@dataclass(frozen=True)
class AdaptPolicy:
    """How Model B is calibrated on each combination (fresh from the base model)."""

    eta: float = 0.1
    steps: int = 100
    alpha: float = 0.2
    n_way: int = 4
    k_shot: int = 4
    q: int = 1
    query_pool: int = 200

    def adapt_config(self) -> meta.AdaptConfig:
        return meta.AdaptConfig(eta=self.eta, steps=self.steps, alpha=self.alpha)

    @property
    def spikes_per_class(self) -> int:
        return -(-(self.query_pool + self.n_way * (self.k_shot + self.q)) // self.n_way)


@dataclass(frozen=True)
class DynamicRecord:
    comb_id: int
    comb_label: str
    noise_sigma: float
    model: str
    cacc: float
    n_spikes: int


@dataclass
class DynamicTestResult:
    records: list[DynamicRecord]
    episodes: list[dict] = field(default_factory=list)

    def cacc_of(self, model: str) -> list[float]:
        return [r.cacc for r in self.records if r.model == model]

    @property
    def median_cacc_A(self) -> float:
        return median(self.cacc_of("A"))

    @property
    def median_cacc_B(self) -> float:
        return median(self.cacc_of("B"))

    def to_dict(self) -> dict:
        return {
            "records": [asdict(r) for r in self.records],
            "median_cacc_A": self.median_cacc_A,
            "median_cacc_B": self.median_cacc_B,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DynamicTestResult":
        return cls([DynamicRecord(**r) for r in d["records"]])


def dynamic_schedule(seed: int = 0, policy: AdaptPolicy = AdaptPolicy()) -> list[GenConfig]:
    return combination_schedule(n_spikes_per_class=policy.spikes_per_class, seed=derive_seed(seed, "dynamic"))


def _run_combination(args):
    i, base, gcfg, policy, seed = args
    ds = preprocess_dataset(generate_dataset(gcfg))
    chan = f"comb{gcfg.comb_id}{COMB_LABELS[gcfg.comb_id - 1]}_sigma{gcfg.noise_sigma:g}"
    ep = meta.sample_episode(ds, policy.n_way, policy.k_shot, policy.q, derive_seed(seed, "episode", i), chan)
    rest = np.setdiff1d(np.arange(len(ds)), np.concatenate([ep.support_idx, ep.query_idx]))
    if len(rest) < policy.query_pool:
        raise ValueError(f"combination {i} has only {len(rest)} spikes for a {policy.query_pool}-spike pool")
    pool = rest[: policy.query_pool]
    qx, qy = ds.waveforms[pool], ds.labels[pool]

    tc = sampler.compress_indices(ep.support_x)
    adapted = meta.adapt(base, ep.support_x, ep.support_y, policy.adapt_config(), comp_targets=tc)
    episode = {
        "episode": i,
        "channel_id": chan,
        "steps": policy.steps,
        "pre_accuracy": meta.evaluate_episode(base, ep.query_x, ep.query_y),
        "post_accuracy": meta.evaluate_episode(adapted, ep.query_x, ep.query_y),
        "support_loss_before": meta.support_loss(base, ep.support_x, ep.support_y, tc, policy.alpha),
        "support_loss_after": meta.support_loss(adapted, ep.support_x, ep.support_y, tc, policy.alpha),
    }
    recs = []
    for name, p in zip(MODELS, (base, adapted)):
        recs.append(DynamicRecord(gcfg.comb_id, COMB_LABELS[gcfg.comb_id - 1], gcfg.noise_sigma, name,
                                  cacc(network.predict_labels(p, qx), qy), len(pool)))
    return recs, episode


def run_dynamic_test(
    base_params: network.ModelParams,
    schedule: list[GenConfig],
    policy: AdaptPolicy = AdaptPolicy(),
    seed: int = 0,
    jobs: int = 1,
) -> DynamicTestResult:
    """Model A (base, unmodified) vs Model B (adapted on one episode) per combination.

    Both models are scored on the same query pool, disjoint from the episode.
    """
    if len(schedule) != N_COMBINATIONS:
        raise ValueError(f"schedule must have {N_COMBINATIONS} combinations, got {len(schedule)}")
    tasks = [(i, base_params, g, policy, seed) for i, g in enumerate(schedule)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            outs = list(ex.map(_run_combination, tasks))
    else:
        outs = [_run_combination(t) for t in tasks]
    records = [r for recs, _ in outs for r in recs]
    return DynamicTestResult(records, [e for _, e in outs])


# --- reports -----------------------------------------------------------------


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def emit_report(
    out_dir: str,
    dynamic: DynamicTestResult | None = None,
    compression: CompressionReport | None = None,
    n_example_spikes: int = 5,
) -> list[str]:
    """Write whichever studies are given; returns the written paths."""
    os.makedirs(os.path.join(out_dir, "plotdata"), exist_ok=True)
    written = []

    def path(*p):
        full = os.path.join(out_dir, *p)
        written.append(full)
        return full

    summary = {}
    if dynamic is not None:
        cols = ("comb_id", "comb_label", "noise_sigma", "model", "cacc", "n_spikes")
        _write_csv(path("dynamic_test.csv"), cols, [[getattr(r, c) for c in cols] for r in dynamic.records])
        _write_json(path("dynamic_test.json"), dynamic.to_dict())
        if dynamic.episodes:
            meta.write_episodes_csv(dynamic.episodes, path("episodes.csv"))
        by_key = {}
        for r in dynamic.records:
            by_key.setdefault((r.comb_id, r.comb_label, r.noise_sigma), {})[r.model] = r.cacc
        _write_csv(
            path("plotdata", "fig7.csv"),
            ("comb_label", "noise_sigma", "cacc_model_a", "cacc_model_b"),
            [[f"{cid}{lab}", s, m["A"], m["B"]] for (cid, lab, s), m in by_key.items()],
        )
        summary.update(median_cacc_A=dynamic.median_cacc_A, median_cacc_B=dynamic.median_cacc_B,
                       cacc_gap=dynamic.median_cacc_B - dynamic.median_cacc_A)
    if compression is not None:
        c = compression
        _write_csv(
            path("compression.csv"),
            ("spike", "rmse", "baseline_rmse", "indices"),
            [[i, c.rmse[i], c.baseline_rmse[i], " ".join(map(str, c.indices[i]))] for i in range(c.n_spikes)],
        )
        rows = []
        for s in range(min(n_example_spikes, c.n_spikes)):
            kept = set(c.indices[s].tolist())
            for t in range(c.originals.shape[1]):
                rows.append([s, t, c.originals[s, t], c.reconstructions[s, t], int(t in kept)])
        _write_csv(path("plotdata", "fig6.csv"), ("spike", "sample", "original", "reconstructed", "retained"), rows)
        summary.update(mean_rmse=c.mean_rmse, baseline_mean_rmse=c.baseline_mean_rmse,
                       compression_ratio=c.compression_ratio, n_spikes=c.n_spikes)
    if summary:
        if any(isinstance(v, float) and not math.isfinite(v) for v in summary.values()):
            raise network.NumericError("non-finite value in report summary")
        _write_json(path("summary.json"), summary)
    return written
