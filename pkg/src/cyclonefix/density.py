"""Probabilistic representation of a cyclone centre on a storm window.

A point centre is spread over the window with a truncated Gaussian kernel
and normalized to unit mass. Predicted fields come out of a softmax, are
scored against targets with a KL divergence, and are decoded back to a
continuous position by taking the expectation over cell coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DataError,
    EmptySupport,
    NonFiniteInput,
    OutOfBounds,
    OutOfWindow,
    SpecMismatch,
)
from .geo import great_circle_deg, wrap_lon
from .gridstore import GridSpec, latlon_to_fractional_index

KL_EPS = 1e-12
METRICS = ("greatcircle", "index")


@dataclass(frozen=True)
class KernelParams:
    sigma: float = 0.25
    radius: float = 0.75

    def __post_init__(self):
        if not self.sigma > 0:
            raise DataError(f"sigma must be positive, got {self.sigma}")
        if not self.radius >= self.sigma:
            raise DataError(f"radius {self.radius} must be >= sigma {self.sigma}")


@dataclass(frozen=True, eq=False)
class DensityField:
    """Unit-mass, nonnegative weights over the cells of ``spec``."""

    spec: GridSpec
    w: np.ndarray

    def __post_init__(self):
        w = np.array(self.w, dtype=np.float64, copy=True)
        if w.shape != self.spec.shape:
            raise SpecMismatch(f"weights {w.shape} do not match grid {self.spec.shape}")
        if not np.all(np.isfinite(w)):
            raise NonFiniteInput("density contains NaN or Inf")
        if np.any(w < 0):
            raise DataError("density has negative weights")
        if abs(w.sum() - 1.0) > 1e-9:
            raise DataError(f"density mass {w.sum()!r} is not 1")
        w.flags.writeable = False
        object.__setattr__(self, "w", w)


def cell_distances(center, spec: GridSpec, metric: str = "greatcircle") -> np.ndarray:
    """Distance in degrees from every cell centre of ``spec`` to ``center``."""
    if metric == "greatcircle":
        return great_circle_deg(spec.lats[:, None], spec.lons[None, :], center[0], center[1])
    if metric == "index":
        fi, fj = latlon_to_fractional_index(center, spec)
        di = (np.arange(spec.nlat) - fi) * spec.dlat
        dj = (np.arange(spec.nlon) - fj) * spec.dlon
        return np.hypot(di[:, None], dj[None, :])
    raise DataError(f"unknown metric {metric!r}; expected one of {METRICS}")


def truncated_gaussian(center, spec: GridSpec, k: KernelParams, metric: str = "greatcircle") -> np.ndarray:
    """Unnormalized kernel weights: exp(-d^2 / 2 sigma^2) inside the radius, 0 outside."""
    d = cell_distances(center, spec, metric)
    g = np.exp(-(d ** 2) / (2.0 * k.sigma ** 2))
    g[d > k.radius] = 0.0
    return g


def encode_center(center, spec: GridSpec, k: KernelParams = KernelParams(),
                  metric: str = "greatcircle") -> DensityField:
    try:
        latlon_to_fractional_index(center, spec)
    except OutOfBounds as exc:
        raise OutOfWindow(str(exc)) from None
    g = truncated_gaussian(center, spec, k, metric)
    total = g.sum()
    if total <= 0.0:
        raise EmptySupport(f"no cell within {k.radius} deg of {tuple(center)}")
    return DensityField(spec, g / total)


def log_softmax(logits: np.ndarray, axis=None) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    m = np.max(z, axis=axis, keepdims=True)
    s = z - m
    return s - np.log(np.sum(np.exp(s), axis=axis, keepdims=True))


def softmax_normalize(logits: np.ndarray, spec: GridSpec) -> DensityField:
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NonFiniteInput("logits contain NaN or Inf")
    e = np.exp(z - z.max())
    w = e / e.sum()
    # renormalize once more so the mass invariant holds to rounding
    return DensityField(spec, w / w.sum())


def kl_divergence(gt: DensityField, pred: DensityField, eps: float = KL_EPS) -> float:
    """KL(gt || pred), with ``pred`` floored at ``eps`` inside the log."""
    if gt.spec != pred.spec:
        raise SpecMismatch("density fields live on different grids")
    p = gt.w
    q = np.maximum(pred.w, eps)
    mask = p > 0
    kl = float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))
    return max(kl, 0.0)


def decode_expectation(field: DensityField) -> tuple[float, float]:
    """Probability-weighted mean position.

    Latitude is a plain weighted mean; longitude is a weighted circular mean
    so windows that straddle the 0 meridian decode correctly.
    """
    w = field.w
    lat = float(np.sum(w.sum(axis=1) * field.spec.lats))
    lam = np.radians(field.spec.lons)
    wl = w.sum(axis=0)
    lon = np.degrees(np.arctan2(np.sum(wl * np.sin(lam)), np.sum(wl * np.cos(lam))))
    return lat, wrap_lon(float(lon))


def decode_argmax(field: DensityField) -> tuple[float, float]:
    """Node of maximal weight; ties go to the lowest row, then lowest column."""
    i, j = np.unravel_index(int(np.argmax(field.w)), field.w.shape)
    return field.spec.node(int(i), int(j))
