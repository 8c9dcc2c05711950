"""Multi-task fully connected network, written directly in numpy.

Shared encoder ``48 -> 128 -> 64`` (FC, batch-norm, ReLU, dropout per layer)
feeding two heads: a compression head producing ``n_keep`` softmax
distributions over the 48 time indices, and a classification head producing
a softmax over spike classes. Training minimizes
``CE(class) + alpha * mean_j CE(comp slot j)`` with Adam.
"""

from __future__ import annotations

import copy
import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .sampler import N_KEEP, CompressedSpike, SamplerConfig, compress_indices
from .seeding import derive_seed, make_rng

N_INPUT = 48
HIDDEN = (128, 64)
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
MIN_DELTA = 1e-4

MODEL_FORMAT = "metasort-model"
MODEL_VERSION = 1


class NumericError(FloatingPointError):
    """Non-finite values appeared in inputs or parameters."""


class CheckpointFormatError(ValueError):
    pass


# --- parameters --------------------------------------------------------------


@dataclass
class ModelParams:
    tensors: dict[str, np.ndarray]
    n_classes: int
    n_keep: int = N_KEEP
    n_input: int = N_INPUT
    hidden: tuple[int, int] = HIDDEN
    meta: dict = field(default_factory=dict)

    SHALLOW = ("enc1.W", "enc1.b", "bn1.gamma", "bn1.beta", "bn1.mean", "bn1.var")
    RUNNING = ("bn1.mean", "bn1.var", "bn2.mean", "bn2.var")

    def copy(self) -> "ModelParams":
        return ModelParams(
            {k: v.copy() for k, v in self.tensors.items()},
            self.n_classes, self.n_keep, self.n_input, self.hidden, copy.deepcopy(self.meta),
        )

    @property
    def shallow_mask(self) -> dict[str, bool]:
        return {k: k in self.SHALLOW for k in self.tensors}

    def trainable(self) -> list[str]:
        return [k for k in self.tensors if k not in self.RUNNING]

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())

    def __getitem__(self, key: str) -> np.ndarray:
        return self.tensors[key]


def init_params(n_classes: int = 4, seed: int = 0, n_keep: int = N_KEEP) -> ModelParams:
    rng = make_rng(derive_seed(seed, "init"))
    h1, h2 = HIDDEN

    def he(fan_in, fan_out):
        return rng.normal(0.0, math.sqrt(2.0 / fan_in), (fan_in, fan_out))

    def glorot(fan_in, fan_out):
        return rng.normal(0.0, math.sqrt(1.0 / fan_in), (fan_in, fan_out))

    t = {
        "enc1.W": he(N_INPUT, h1),
        "enc1.b": np.zeros(h1),
        "bn1.gamma": np.ones(h1),
        "bn1.beta": np.zeros(h1),
        "bn1.mean": np.zeros(h1),
        "bn1.var": np.ones(h1),
        "enc2.W": he(h1, h2),
        "enc2.b": np.zeros(h2),
        "bn2.gamma": np.ones(h2),
        "bn2.beta": np.zeros(h2),
        "bn2.mean": np.zeros(h2),
        "bn2.var": np.ones(h2),
        "comp.W": glorot(h2, n_keep * N_INPUT),
        "comp.b": np.zeros(n_keep * N_INPUT),
        "cls.W": glorot(h2, n_classes),
        "cls.b": np.zeros(n_classes),
    }
    return ModelParams(t, n_classes, n_keep)


def split_params(params: ModelParams) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Shallow (first encoder layer, incl. its BN state) and deep tensor groups."""
    mask = params.shallow_mask
    shallow = {k: v for k, v in params.tensors.items() if mask[k]}
    deep = {k: v for k, v in params.tensors.items() if not mask[k]}
    return shallow, deep


# --- forward / loss / backward ----------------------------------------------


@dataclass
class ForwardOutput:
    comp_probs: np.ndarray  # (B, K, 48)
    class_probs: np.ndarray  # (B, C)
    latent: np.ndarray  # (B, 64)
    comp_logp: np.ndarray
    class_logp: np.ndarray
    cache: dict
    bn_stats: dict


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(z, axis=axis, keepdims=True)
    s = z - m
    return s - np.log(np.sum(np.exp(s), axis=axis, keepdims=True))


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(z - np.max(z, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def _bn_forward(a, gamma, beta, mean, var, train):
    if train:
        mu = a.mean(axis=0)
        v = a.var(axis=0)
    else:
        mu, v = mean, var
    std = np.sqrt(v + BN_EPS)
    xhat = (a - mu) / std
    return gamma * xhat + beta, xhat, std, mu, v


def forward(
    params: ModelParams,
    x: np.ndarray,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    dropout: float = 0.0,
) -> ForwardOutput:
    """Forward pass; ``mode="train"`` uses batch statistics and (if ``dropout``) dropout."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.n_input:
        raise ValueError(f"expected input of shape (B, {params.n_input}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite network input")
    train = mode == "train"
    if train and dropout > 0 and rng is None:
        raise ValueError("dropout in train mode needs an rng")
    t = params.tensors
    cache = {"x": x, "train": train}
    bn_stats = {}
    act = x
    for li in (1, 2):
        a = act @ t[f"enc{li}.W"] + t[f"enc{li}.b"]
        z, xhat, std, mu, v = _bn_forward(
            a, t[f"bn{li}.gamma"], t[f"bn{li}.beta"], t[f"bn{li}.mean"], t[f"bn{li}.var"], train
        )
        r = np.maximum(z, 0.0)
        if train and dropout > 0:
            mask = (rng.random(r.shape) >= dropout) / (1.0 - dropout)
        else:
            mask = None
        out = r * mask if mask is not None else r
        cache[li] = {"in": act, "xhat": xhat, "std": std, "z": z, "mask": mask}
        if train:
            bn_stats[li] = (mu, v, a.shape[0])
        act = out
    h = act
    B = x.shape[0]
    comp_z = (h @ t["comp.W"] + t["comp.b"]).reshape(B, params.n_keep, params.n_input)
    cls_z = h @ t["cls.W"] + t["cls.b"]
    comp_logp = log_softmax(comp_z)
    cls_logp = log_softmax(cls_z)
    cache["h"] = h
    return ForwardOutput(np.exp(comp_logp), np.exp(cls_logp), h, comp_logp, cls_logp, cache, bn_stats)


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    class_ce: float
    comp_ce: float
    alpha: float


def _check_targets(out: ForwardOutput, class_targets, comp_targets):
    y = np.asarray(class_targets, dtype=np.int64)
    tc = np.asarray(comp_targets, dtype=np.int64)
    B, K, L = out.comp_probs.shape
    C = out.class_probs.shape[1]
    if y.shape != (B,) or tc.shape != (B, K):
        raise ValueError(f"target shapes {y.shape}, {tc.shape} do not match batch ({B}, {K})")
    if np.any((y < 0) | (y >= C)):
        raise ValueError("class label out of range")
    if np.any((tc < 0) | (tc >= L)):
        raise ValueError("compression target index out of range")
    return y, tc


def total_loss(out: ForwardOutput, class_targets, comp_targets, alpha: float) -> LossBreakdown:
    y, tc = _check_targets(out, class_targets, comp_targets)
    B, K, _ = out.comp_probs.shape
    class_ce = -float(np.mean(out.class_logp[np.arange(B), y]))
    picked = np.take_along_axis(out.comp_logp, tc[:, :, None], axis=2)[:, :, 0]
    comp_ce = -float(np.mean(picked))
    return LossBreakdown(class_ce + alpha * comp_ce, class_ce, comp_ce, alpha)


def backward(params: ModelParams, out: ForwardOutput, class_targets, comp_targets, alpha: float) -> dict[str, np.ndarray]:
    """Exact gradients of ``total_loss`` for every trainable tensor."""
    y, tc = _check_targets(out, class_targets, comp_targets)
    t = params.tensors
    c = out.cache
    B, K, L = out.comp_probs.shape
    grads = {}

    d_cls = out.class_probs.copy()
    d_cls[np.arange(B), y] -= 1.0
    d_cls /= B
    d_comp = out.comp_probs.copy()
    np.put_along_axis(d_comp, tc[:, :, None], np.take_along_axis(d_comp, tc[:, :, None], axis=2) - 1.0, axis=2)
    d_comp *= alpha / (B * K)
    d_comp = d_comp.reshape(B, K * L)

    h = c["h"]
    grads["cls.W"] = h.T @ d_cls
    grads["cls.b"] = d_cls.sum(axis=0)
    grads["comp.W"] = h.T @ d_comp
    grads["comp.b"] = d_comp.sum(axis=0)
    dact = d_cls @ t["cls.W"].T + d_comp @ t["comp.W"].T

    for li in (2, 1):
        lc = c[li]
        if lc["mask"] is not None:
            dact = dact * lc["mask"]
        dz = dact * (lc["z"] > 0)
        grads[f"bn{li}.gamma"] = np.sum(dz * lc["xhat"], axis=0)
        grads[f"bn{li}.beta"] = dz.sum(axis=0)
        dxhat = dz * t[f"bn{li}.gamma"]
        if c["train"]:
            n = dxhat.shape[0]
            da = (n * dxhat - dxhat.sum(axis=0) - lc["xhat"] * np.sum(dxhat * lc["xhat"], axis=0)) / (n * lc["std"])
        else:
            da = dxhat / lc["std"]
        grads[f"enc{li}.W"] = lc["in"].T @ da
        grads[f"enc{li}.b"] = da.sum(axis=0)
        if li == 2:
            dact = da @ t["enc2.W"].T
    return grads


def apply_bn_stats(params: ModelParams, bn_stats: dict) -> None:
    for li, (mu, v, n) in bn_stats.items():
        unbiased = v * n / (n - 1) if n > 1 else v
        params.tensors[f"bn{li}.mean"] = (1 - BN_MOMENTUM) * params.tensors[f"bn{li}.mean"] + BN_MOMENTUM * mu
        params.tensors[f"bn{li}.var"] = (1 - BN_MOMENTUM) * params.tensors[f"bn{li}.var"] + BN_MOMENTUM * unbiased


# --- optimizer ---------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        names = params.trainable()
        return cls({k: np.zeros_like(params[k]) for k in names}, {k: np.zeros_like(params[k]) for k in names})


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """In-place bias-corrected Adam update over the tensors present in ``grads``."""
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for k, g in grads.items():
        m = state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        v = state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        params.tensors[k] = params.tensors[k] - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# --- training ----------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    lr_initial: float = 1e-3
    lr_halving_patience: int = 10
    early_stop_patience: int = 20
    max_epochs: int = 300
    dropout: float = 0.3
    alpha: float = 0.2
    seed: int = 0

    def validate(self):
        if self.alpha < 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("need alpha >= 0, batch_size >= 1, max_epochs >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.lr_initial <= 0 or self.lr_halving_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("lr_initial and patiences must be positive")


class PlateauMonitor:
    """Tracks validation loss: lr halving on plateaus and early stopping.

    An epoch improves when its loss beats the best so far by more than
    ``min_delta``. The lr halves after ``lr_patience`` epochs without
    improvement (counter resets on each halving); training stops after
    ``stop_patience`` consecutive non-improving epochs.
    """

    def __init__(self, lr_patience: int, stop_patience: int, min_delta: float = MIN_DELTA):
        self.lr_patience = lr_patience
        self.stop_patience = stop_patience
        self.min_delta = min_delta
        self.best = math.inf
        self.best_epoch = -1
        self.since_best = 0
        self.since_halving = 0

    def update(self, epoch: int, loss: float) -> tuple[bool, bool, bool]:
        """Returns ``(improved, halve_lr, stop)``."""
        if loss < self.best - self.min_delta:
            self.best, self.best_epoch = loss, epoch
            self.since_best = self.since_halving = 0
            return True, False, False
        self.since_best += 1
        self.since_halving += 1
        if self.since_best >= self.stop_patience:
            return False, False, True
        if self.since_halving >= self.lr_patience:
            self.since_halving = 0
            return False, True, False
        return False, False, False


@dataclass
class TrainingHistory:
    rows: list[dict] = field(default_factory=list)
    halved_at: list[int] = field(default_factory=list)
    stopped_at: int | None = None
    best_epoch: int | None = None

    COLUMNS = ("epoch", "train_loss", "val_loss", "val_class_acc", "val_comp_acc", "lr")

    def write_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([r["epoch"]] + [repr(float(r[k])) for k in self.COLUMNS[1:]])


def comp_targets_for(x: np.ndarray, sampler_cfg: SamplerConfig = SamplerConfig()) -> np.ndarray:
    """Sorted sampler indices used as per-slot compression supervision."""
    return compress_indices(x, sampler_cfg)


def evaluate_loss(params, x, y, tc, alpha) -> tuple[LossBreakdown, float, float]:
    out = forward(params, x, "eval")
    loss = total_loss(out, y, tc, alpha)
    class_acc = float(np.mean(np.argmax(out.class_probs, axis=1) == y))
    comp_acc = float(np.mean(np.argmax(out.comp_probs, axis=2) == tc))
    return loss, class_acc, comp_acc


def train(
    dataset,
    cfg: TrainConfig = TrainConfig(),
    sampler_cfg: SamplerConfig = SamplerConfig(),
    val_loss_fn: Callable[[int, ModelParams], float] | None = None,
    on_epoch: Callable[[int, ModelParams], None] | None = None,
) -> tuple[ModelParams, TrainingHistory]:
    """Train on the ``train`` split, select on ``val``; returns the best checkpoint.

    ``val_loss_fn(epoch, params)`` replaces the measured validation loss for
    scheduling decisions (used to script plateau scenarios in tests).
    """
    cfg.validate()
    tr = dataset.subset("train")
    va = dataset.subset("val")
    if len(tr) == 0 or len(va) == 0:
        raise ValueError("dataset needs non-empty train and val splits")
    if tr.waveforms.shape[1] != N_INPUT:
        raise ValueError("dataset must be preprocessed to 48-sample windows")
    xtr, ytr = tr.waveforms, tr.labels
    xva, yva = va.waveforms, va.labels
    ttr = comp_targets_for(xtr, sampler_cfg)
    tva = comp_targets_for(xva, sampler_cfg)

    params = init_params(dataset.n_classes, cfg.seed)
    params.meta = {"train_config": asdict(cfg), "sampler_config": asdict(sampler_cfg),
                   "class_names": list(dataset.class_names)}
    state = AdamState.zeros(params)
    shuffle_rng = make_rng(derive_seed(cfg.seed, "shuffle"))
    drop_rng = make_rng(derive_seed(cfg.seed, "dropout"))
    monitor = PlateauMonitor(cfg.lr_halving_patience, cfg.early_stop_patience)
    hist = TrainingHistory()
    lr = cfg.lr_initial
    best = params.copy()
    n = len(xtr)

    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(n)
        losses, weights = [], []
        for start in range(0, n, cfg.batch_size):
            bi = order[start:start + cfg.batch_size]
            if len(bi) < 2:
                continue  # batch-norm needs at least two samples
            out = forward(params, xtr[bi], "train", drop_rng, cfg.dropout)
            lb = total_loss(out, ytr[bi], ttr[bi], cfg.alpha)
            grads = backward(params, out, ytr[bi], ttr[bi], cfg.alpha)
            adam_step(params, grads, state, lr)
            apply_bn_stats(params, out.bn_stats)
            if not params.is_finite():
                raise NumericError(f"non-finite parameters after epoch {epoch} update")
            losses.append(lb.total)
            weights.append(len(bi))
        vloss, vacc, vcomp = evaluate_loss(params, xva, yva, tva, cfg.alpha)
        val = vloss.total if val_loss_fn is None else float(val_loss_fn(epoch, params))
        hist.rows.append({
            "epoch": epoch,
            "train_loss": float(np.average(losses, weights=weights)) if losses else math.nan,
            "val_loss": val,
            "val_class_acc": vacc,
            "val_comp_acc": vcomp,
            "lr": lr,
        })
        if on_epoch is not None:
            on_epoch(epoch, params)
        improved, halve, stop = monitor.update(epoch, val)
        if improved:
            best = params.copy()
        if stop:
            hist.stopped_at = epoch
            break
        if halve:
            lr *= 0.5
            hist.halved_at.append(epoch)
    hist.best_epoch = monitor.best_epoch
    best.meta = params.meta
    return best, hist


# --- inference ---------------------------------------------------------------


def _as_batch(spike) -> np.ndarray:
    x = np.asarray(getattr(spike, "samples", spike), dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


def greedy_indices(comp_probs: np.ndarray) -> np.ndarray:
    """Per-slot argmax; a slot whose choice is taken falls to its best untaken index."""
    K, L = comp_probs.shape
    taken = np.zeros(L, dtype=bool)
    out = np.empty(K, dtype=np.int64)
    for j in range(K):
        for i in np.argsort(-comp_probs[j], kind="stable"):
            if not taken[i]:
                taken[i] = True
                out[j] = i
                break
    return np.sort(out)


def predict_compress(params: ModelParams, spike) -> CompressedSpike:
    x = _as_batch(spike)
    probs = forward(params, x, "eval").comp_probs[0]
    idx = greedy_indices(probs)
    return CompressedSpike(idx, x[0, idx], x.shape[1])


def predict_class(params: ModelParams, spike) -> tuple[int, np.ndarray]:
    probs = forward(params, _as_batch(spike), "eval").class_probs[0]
    return int(np.argmax(probs)), probs


def predict_labels(params: ModelParams, x: np.ndarray) -> np.ndarray:
    return np.argmax(forward(params, x, "eval").class_probs, axis=1)


# --- checkpoints -------------------------------------------------------------


def params_to_dict(params: ModelParams) -> dict:
    mask = params.shallow_mask
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "architecture": {
            "n_input": params.n_input,
            "hidden": list(params.hidden),
            "n_keep": params.n_keep,
            "n_classes": params.n_classes,
            "activation": "relu",
            "bn_eps": BN_EPS,
            "bn_momentum": BN_MOMENTUM,
        },
        "optimizer": {"name": "adam", "beta1": ADAM_BETA1, "beta2": ADAM_BETA2, "eps": ADAM_EPS},
        "meta": params.meta,
        "layers": [
            {
                "name": k,
                "shape": list(v.shape),
                "group": "shallow" if mask[k] else "deep",
                "trainable": k not in params.RUNNING,
                "data": v.ravel().tolist(),
            }
            for k, v in params.tensors.items()
        ],
    }


def params_from_dict(d: dict) -> ModelParams:
    if d.get("format") != MODEL_FORMAT:
        raise CheckpointFormatError(f"not a {MODEL_FORMAT} checkpoint")
    if d.get("version") != MODEL_VERSION:
        raise CheckpointFormatError(f"checkpoint version {d.get('version')} unsupported (expected {MODEL_VERSION})")
    arch = d["architecture"]
    tensors = {
        layer["name"]: np.asarray(layer["data"], dtype=np.float64).reshape(layer["shape"])
        for layer in d["layers"]
    }
    return ModelParams(tensors, arch["n_classes"], arch["n_keep"], arch["n_input"], tuple(arch["hidden"]), d.get("meta", {}))


def save_params(params: ModelParams, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(params_to_dict(params), fh)
        fh.write("\n")


def load_params(path: str) -> ModelParams:
    with open(path, encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as e:
            raise CheckpointFormatError(f"{path}: not valid JSON ({e})") from e
    return params_from_dict(d)
