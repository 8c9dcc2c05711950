"""Frozen-shallow fine-tuning on few-shot support sets.

The first encoder layer (weights, bias, batch-norm affine and running
statistics) stays fixed; every deeper tensor takes plain gradient steps on
the joint loss over the full support set, with batch-norm in inference mode.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .network import ModelParams, NumericError, backward, forward, predict_labels, split_params, total_loss
from .sampler import SamplerConfig, compress_indices
from .seeding import make_rng

__all__ = [
    "AdaptConfig",
    "Episode",
    "adapt",
    "evaluate_episode",
    "sample_episode",
    "split_params",
    "support_loss",
    "write_episodes_csv",
]


@dataclass(frozen=True)
class AdaptConfig:
    eta: float = 1e-3
    steps: int = 10
    alpha: float = 0.2

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError(f"eta must be > 0, got {self.eta}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")


@dataclass(frozen=True)
class Episode:
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    channel_id: str = ""
    support_idx: np.ndarray | None = None
    query_idx: np.ndarray | None = None

    @property
    def n_way(self) -> int:
        return len(np.unique(self.support_y))


def sample_episode(
    channel_data,
    n_way: int = 4,
    k_shot: int = 4,
    q: int = 1,
    seed: int = 0,
    channel_id: str = "",
    classes=None,
    exclude=None,
) -> Episode:
    """Per-class uniform draw without replacement of ``k_shot + q`` spikes.

    ``classes`` defaults to the ``n_way`` smallest labels present; rows listed
    in ``exclude`` are never drawn.
    """
    x = np.asarray(channel_data.waveforms)
    y = np.asarray(channel_data.labels)
    allowed = np.ones(len(y), dtype=bool)
    if exclude is not None:
        allowed[np.asarray(exclude, dtype=np.int64)] = False
    if classes is None:
        classes = np.unique(y)[:n_way]
    classes = list(classes)
    if len(classes) != n_way:
        raise ValueError(f"need {n_way} classes, data has {len(classes)}")
    rng = make_rng(seed)
    sup, qry = [], []
    for c in classes:
        pool = np.flatnonzero((y == c) & allowed)
        if len(pool) < k_shot + q:
            raise ValueError(f"class {c} has {len(pool)} spikes, episode needs {k_shot + q}")
        pick = rng.choice(pool, size=k_shot + q, replace=False)
        sup.extend(pick[:k_shot])
        qry.extend(pick[k_shot:])
    sup = np.asarray(sup, dtype=np.int64)
    qry = np.asarray(qry, dtype=np.int64)
    return Episode(x[sup], y[sup], x[qry], y[qry], channel_id, sup, qry)


def _deep_names(params: ModelParams) -> list[str]:
    mask = params.shallow_mask
    return [k for k in params.trainable() if not mask[k]]


def support_loss(params: ModelParams, x, y, comp_targets, alpha: float = 0.2) -> float:
    return total_loss(forward(params, x, "eval"), y, comp_targets, alpha).total


def adapt(
    params: ModelParams,
    support_x,
    support_y,
    cfg: AdaptConfig = AdaptConfig(),
    comp_targets=None,
    sampler_cfg: SamplerConfig = SamplerConfig(),
) -> ModelParams:
    """Return a copy of ``params`` with the deep tensors fine-tuned on the support set.

    Each step is ``theta_d <- theta_d - eta * grad`` over the whole support
    set; shallow tensors are copied unchanged.
    """
    out = params.copy()
    if cfg.steps == 0:
        return out
    x = np.asarray(support_x, dtype=np.float64)
    y = np.asarray(support_y, dtype=np.int64)
    tc = compress_indices(x, sampler_cfg) if comp_targets is None else np.asarray(comp_targets)
    deep = _deep_names(out)
    for _ in range(cfg.steps):
        fo = forward(out, x, "eval")
        grads = backward(out, fo, y, tc, cfg.alpha)
        for k in deep:
            out.tensors[k] = out.tensors[k] - cfg.eta * grads[k]
    if not out.is_finite():
        raise NumericError("adaptation diverged to non-finite parameters")
    return out


def evaluate_episode(params: ModelParams, query_x, query_y) -> float:
    qx = np.asarray(query_x, dtype=np.float64)
    qy = np.asarray(query_y)
    if len(qy) == 0:
        raise ValueError("empty query set")
    if qx.ndim == 1:
        qx = qx[None, :]
    return float(np.mean(predict_labels(params, qx) == qy))


EPISODE_COLUMNS = ("episode", "channel_id", "steps", "pre_accuracy", "post_accuracy", "support_loss_before", "support_loss_after")


def write_episodes_csv(rows: list[dict], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EPISODE_COLUMNS)
        for r in rows:
            w.writerow([r[c] if isinstance(r[c], (int, str)) else repr(float(r[c])) for c in EPISODE_COLUMNS])
