"""Adaptive level-crossing compression of aligned spikes.

Per-sample resolution follows a curvature-first cascade: strong curvature
gets dense level spacing, moderate curvature medium spacing, and otherwise
the slope decides between low and very-low spacing. A reference-delta level
crossing scan proposes candidate samples, which are then trimmed or padded
to exactly ``n_keep`` points.

The scan and the trim/pad step run in a compiled kernel when the extension
is built; ``METASORT_PURE_PYTHON=1`` forces the Python kernels.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import _sampler_py

try:
    if os.environ.get("METASORT_PURE_PYTHON"):
        raise ImportError("pure-python kernels requested")
    from . import _sampler_ext as _kernels

    BACKEND = "cython"
except ImportError:
    _kernels = _sampler_py
    BACKEND = "python"

N_KEEP = 8
RES_DENSE, RES_MEDIUM, RES_LOW, RES_VERY_LOW = 3, 2, 1, 0


def get_kernels(name: str | None = None):
    """Kernel module by name (``"cython"`` / ``"python"``); default is the active one."""
    if name is None:
        return _kernels
    if name == "python":
        return _sampler_py
    if name == "cython":
        from . import _sampler_ext

        return _sampler_ext
    raise ValueError(f"unknown sampler backend {name!r}")


@dataclass(frozen=True)
class SamplerConfig:
    k_dense: float = 0.7
    k_medium: float = 0.35
    slope_low: float = 0.5
    # level spacing indexed by RES value (0 = very low ... 3 = dense)
    delta_v: tuple[float, float, float, float] = (0.10, 0.07, 0.05, 0.03)
    n_keep: int = N_KEEP
    # "optimal": least-SSE subset of the candidates; "salience": largest |k|
    trim: str = "optimal"

    def __post_init__(self):
        if self.trim not in ("optimal", "salience"):
            raise ValueError(f"trim must be 'optimal' or 'salience', got {self.trim!r}")
        if len(self.delta_v) != 4 or min(self.delta_v) < 0:
            raise ValueError("delta_v needs four nonnegative level spacings")
        if self.n_keep < 1:
            raise ValueError("n_keep must be >= 1")


@dataclass(frozen=True)
class GeometryProfile:
    slope: np.ndarray
    curvature: np.ndarray


@dataclass(frozen=True)
class ResolutionProfile:
    res: np.ndarray
    delta_v: np.ndarray  # per-sample level spacing
    spacing: tuple[float, float, float, float] = SamplerConfig.delta_v


@dataclass(frozen=True)
class CompressedSpike:
    indices: np.ndarray
    values: np.ndarray
    source_len: int = 48

    def __post_init__(self):
        idx = np.asarray(self.indices)
        if len(idx) != len(self.values) or np.any(np.diff(idx) <= 0):
            raise ValueError("indices must be strictly increasing and match values")
        if idx[0] < 0 or idx[-1] >= self.source_len:
            raise ValueError("indices out of range")

    @property
    def ratio(self) -> float:
        return self.source_len / len(self.indices)


def compute_geometry(w) -> GeometryProfile:
    """Slope and curvature with unit sample spacing along the last axis.

    Slope uses central differences (one-sided at the ends); the second
    derivative is the second central difference, copied from the nearest
    interior sample at the ends.
    """
    w = np.asarray(w, dtype=np.float64)
    slope = np.gradient(w, axis=-1)
    d2 = np.empty_like(w)
    d2[..., 1:-1] = w[..., 2:] - 2.0 * w[..., 1:-1] + w[..., :-2]
    d2[..., 0] = d2[..., 1]
    d2[..., -1] = d2[..., -2]
    curvature = d2 / (1.0 + slope**2) ** 1.5
    return GeometryProfile(slope, curvature)


def resolution_profile(g: GeometryProfile, cfg: SamplerConfig = SamplerConfig()) -> ResolutionProfile:
    ka = np.abs(g.curvature)
    sa = np.abs(g.slope)
    res = np.where(
        ka > cfg.k_dense,
        RES_DENSE,
        np.where(ka > cfg.k_medium, RES_MEDIUM, np.where(sa > cfg.slope_low, RES_LOW, RES_VERY_LOW)),
    ).astype(np.int8)
    dv = np.asarray(cfg.delta_v, dtype=np.float64)[res]
    return ResolutionProfile(res, dv, tuple(cfg.delta_v))


def level_cross_select(w, r: ResolutionProfile) -> list[int]:
    """Emit index i when the sample moved >= delta_v[i] from the last emitted one."""
    return list(_kernels.level_cross(np.asarray(w, dtype=np.float64), r.delta_v))


def select_top8(
    candidates, w, g: GeometryProfile, n_keep: int = N_KEEP, trim: str = "optimal"
) -> CompressedSpike:
    """Reduce or pad ``candidates`` to exactly ``n_keep`` sorted indices.

    Too many candidates: ``trim="optimal"`` keeps the subset whose piecewise
    linear reconstruction has the least squared error (exact dynamic program);
    ``trim="salience"`` keeps the largest ``|curvature|`` (ties: larger
    ``|slope|``, then smaller index). Too few: the midpoint of the widest gap
    is inserted repeatedly; an uncovered window edge counts as a gap that is
    filled at the edge itself.
    """
    w = np.asarray(w, dtype=np.float64)
    idx = _kernels.select(
        list(candidates), w, np.abs(g.curvature), np.abs(g.slope), n_keep, trim == "optimal"
    )
    idx = np.asarray(idx, dtype=np.int64)
    return CompressedSpike(idx, w[idx], len(w))


def compress(w, cfg: SamplerConfig = SamplerConfig()) -> CompressedSpike:
    w = getattr(w, "samples", w)
    g = compute_geometry(w)
    r = resolution_profile(g, cfg)
    return select_top8(level_cross_select(w, r), w, g, cfg.n_keep, cfg.trim)


def compress_indices(x: np.ndarray, cfg: SamplerConfig = SamplerConfig(), backend: str | None = None) -> np.ndarray:
    """Retained indices for every row of ``x``, shape ``(n, n_keep)``."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    g = compute_geometry(x)
    r = resolution_profile(g, cfg)
    k = get_kernels(backend)
    return k.compress_batch(
        x,
        np.ascontiguousarray(np.abs(g.curvature)),
        np.ascontiguousarray(np.abs(g.slope)),
        np.ascontiguousarray(r.delta_v),
        cfg.n_keep,
        cfg.trim == "optimal",
    )


def reconstruct(c: CompressedSpike) -> np.ndarray:
    """Piecewise-linear interpolation, holding the end values outside the retained span."""
    return _kernels.reconstruct(
        np.asarray(c.indices, dtype=np.int64), np.asarray(c.values, dtype=np.float64), c.source_len
    )


def reconstruct_batch(idx: np.ndarray, x: np.ndarray, backend: str | None = None) -> np.ndarray:
    vals = np.take_along_axis(np.asarray(x, dtype=np.float64), idx, axis=1)
    return get_kernels(backend).reconstruct_batch(idx, np.ascontiguousarray(vals), x.shape[1])


def uniform_indices(length: int = 48, n_keep: int = N_KEEP) -> np.ndarray:
    step = length // n_keep
    return np.arange(0, step * n_keep, step, dtype=np.int64)


def rmse(original, reconstructed) -> float:
    a = np.asarray(original, dtype=np.float64)
    b = np.asarray(reconstructed, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def rmse_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return np.sqrt(np.mean((a - b) ** 2, axis=-1))
