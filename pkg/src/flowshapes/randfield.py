"""Random inflow profile: truncated sine expansion with uniform coefficients.

The inflow speed at height y is

    kappa(y, xi) = (1/100)(10 + y)(10 - y)
                   + sum_{l=1}^{n} l^(-decay - 1/2) sin(pi l y / 10) xi_l

with xi_l iid uniform on [-1, 1].  Samples come from counter-based Philox
substreams keyed by (seed, stream, k, j) with a fixed counter offset per
sample index l, so sample (k, j, l) is a pure function of its key and does
not depend on scheduling or batch size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# 64-bit draws reserved per sample index inside one (seed, stream, k, j) key.
_DRAWS_PER_SAMPLE = 32


@dataclass(frozen=True)
class InflowModel:
    """Parameters of the truncated inflow expansion."""

    n_modes: int = 20
    decay: float = 2.5
    half_width: float = 10.0

    def __post_init__(self):
        if self.n_modes < 1:
            raise ValueError("n_modes must be >= 1")
        if self.half_width <= 0.0:
            raise ValueError("half_width must be positive")


DEFAULT_MODEL = InflowModel()


def mean_profile(y, model: InflowModel = DEFAULT_MODEL) -> np.ndarray:
    """Expected inflow speed: the parabola scaled to 1 at the centerline."""
    y = np.asarray(y, dtype=float)
    hw = model.half_width
    return (hw + y) * (hw - y) / hw**2


def variance_profile(y, model: InflowModel = DEFAULT_MODEL) -> np.ndarray:
    """Pointwise variance: sum_l l^(-2 decay - 1) sin^2(pi l y / hw) / 3."""
    y = np.asarray(y, dtype=float)
    ell = np.arange(1, model.n_modes + 1, dtype=float)
    modes = np.sin(np.pi * np.outer(y, ell) / model.half_width) ** 2
    return modes @ (ell ** (-2.0 * model.decay - 1.0)) / 3.0


def kappa(y, xi, model: InflowModel = DEFAULT_MODEL) -> np.ndarray:
    """Inflow speed at heights y for one coefficient vector xi."""
    y = np.asarray(y, dtype=float)
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (model.n_modes,):
        raise ValueError(f"xi must have shape ({model.n_modes},), got {xi.shape}")
    ell = np.arange(1, model.n_modes + 1, dtype=float)
    modes = np.sin(np.pi * np.outer(np.atleast_1d(y), ell) / model.half_width)
    out = np.atleast_1d(mean_profile(y, model)) + modes @ (ell ** (-model.decay - 0.5) * xi)
    return out if y.ndim else float(out[0])


def g_eval(points, xi, model: InflowModel = DEFAULT_MODEL) -> np.ndarray:
    """Inflow velocity (kappa(y, xi), 0) at the given points."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    g = np.zeros_like(points)
    g[:, 0] = kappa(points[:, 1], xi, model)
    return g


def _bitgen(seed: int, stream: int, k: int, j: int) -> np.random.Philox:
    for name, v in (("seed", seed), ("stream", stream), ("k", k), ("j", j)):
        if v < 0:
            raise ValueError(f"{name} must be nonnegative")
    return np.random.Philox(np.random.SeedSequence([seed, stream, k, j]))


def draw_batch(
    seed: int, k: int, j: int, m: int, model: InflowModel = DEFAULT_MODEL, stream: int = 0
) -> np.ndarray:
    """Coefficient batch of shape (m, n_modes); row l equals draw_sample(l).

    Uniform variates on [-1, 1) are produced from 64-bit words by the
    standard 53-bit mantissa mapping u in [0, 1) followed by 2u - 1.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    stride = _stride(model)
    gen = np.random.Generator(_bitgen(seed, stream, k, j))
    u = gen.random(m * stride).reshape(m, stride)[:, : model.n_modes]
    return 2.0 * u - 1.0


def draw_sample(
    seed: int, k: int, j: int, l: int, model: InflowModel = DEFAULT_MODEL, stream: int = 0
) -> np.ndarray:
    """Single coefficient vector; pure function of (seed, stream, k, j, l)."""
    if l < 0:
        raise ValueError("l must be nonnegative")
    stride = _stride(model)
    bg = _bitgen(seed, stream, k, j)
    # Philox.advance counts 4x64-bit blocks, so stride uint64 words = stride/4.
    bg.advance(l * stride // 4)
    u = np.random.Generator(bg).random(model.n_modes)
    return 2.0 * u - 1.0


def _stride(model: InflowModel) -> int:
    blocks = max(1, (model.n_modes + _DRAWS_PER_SAMPLE - 1) // _DRAWS_PER_SAMPLE)
    return blocks * _DRAWS_PER_SAMPLE
