"""Deterministic drivers and fixtures: sampled smooth curves and Gaussian walks.

Smooth fixtures default to the exact signature of the curve (``lift="exact"``);
``lift="chord"`` gives the piecewise-linear lift instead.  The Brownian
driver is a piecewise-linear interpolation, so its antisymmetric level 2 is
the Levy area of the interpolation, a desk-scale stand-in for a genuine
stochastic lift.
"""
from __future__ import annotations

import numpy as np

from .errors import UsageError
from .tensor import DEFAULT_P, GridRoughPath, pure_area_path, signature_lift


def uniform_grid(n: int, T: float = 1.0) -> np.ndarray:
    if n < 1:
        raise UsageError("need at least one grid interval")
    return np.linspace(0.0, T, n + 1)


def sample_lift(curve, n: int, T: float = 1.0, p: float = DEFAULT_P) -> GridRoughPath:
    t = uniform_grid(n, T)
    return signature_lift(t, curve(t), p)


def smooth_lift(pos, vel, n: int, T: float = 1.0, p: float = DEFAULT_P, nodes: int = 8) -> GridRoughPath:
    """Level-2 signature of a smooth curve itself, not of its chords.

    Each step's area int (x_r - x_k) (x) dx_r is computed by Gauss-Legendre
    quadrature; the symmetric part is set to half the square of the increment.
    """
    t = uniform_grid(n, T)
    xs = pos(t)
    if xs.ndim == 1:
        raise UsageError("curve must be vector valued")
    r, w = np.polynomial.legendre.leggauss(nodes)
    h = np.diff(t)
    tau = t[:-1, None] + 0.5 * h[:, None] * (r[None, :] + 1.0)  # (n, q)
    x = pos(tau) - xs[:-1, None, :]
    v = vel(tau)
    L = 0.5 * h[:, None, None] * np.einsum("q,nqi,nqj->nij", w, x, v)
    d = np.diff(xs, axis=0)
    step2 = 0.5 * (L - np.swapaxes(L, 1, 2)) + 0.5 * d[:, :, None] * d[:, None, :]
    return GridRoughPath(t, xs, step2, p)


def _lift(curve, n, T, p, lift):
    if lift == "exact":
        return smooth_lift(curve[0], curve[1], n, T, p)
    if lift == "chord":
        return sample_lift(curve[0], n, T, p)
    raise UsageError(f"unknown lift {lift!r}; use 'exact' or 'chord'")


# -- curves: each returns (position, velocity) callables ------------------


def line_curve(direction, start=None):
    v = np.asarray(direction, dtype=float)
    x0 = np.zeros_like(v) if start is None else np.asarray(start, dtype=float)
    return (lambda t: x0 + np.multiply.outer(t, v)), (lambda t: np.broadcast_to(v, np.shape(t) + v.shape).copy())


def planar_circle_curve(radius: float = 1.0, omega: float = 2 * np.pi):
    """Circle through the origin: z_t = r (sin wt, 1 - cos wt)."""

    def pos(t):
        t = np.asarray(t, dtype=float)
        return radius * np.stack([np.sin(omega * t), 1.0 - np.cos(omega * t)], axis=-1)

    def vel(t):
        t = np.asarray(t, dtype=float)
        return radius * omega * np.stack([np.cos(omega * t), np.sin(omega * t)], axis=-1)

    return pos, vel


def lissajous_curve(a: float = 0.6, b: float = 0.4, fa: float = 1.0, fb: float = 2.0):
    """z_t = (a sin(2 pi fa t), b sin(2 pi fb t)), starting at the origin."""
    wa, wb = 2 * np.pi * fa, 2 * np.pi * fb

    def pos(t):
        t = np.asarray(t, dtype=float)
        return np.stack([a * np.sin(wa * t), b * np.sin(wb * t)], axis=-1)

    def vel(t):
        t = np.asarray(t, dtype=float)
        return np.stack([a * wa * np.cos(wa * t), b * wb * np.cos(wb * t)], axis=-1)

    return pos, vel


def great_circle_curve(x0=(1.0, 0.0, 0.0), v0=(0.0, 1.0, 0.0), speed: float = 1.0):
    """Unit-sphere great circle through x0 with unit initial direction v0."""
    x0 = np.asarray(x0, dtype=float)
    v0 = np.asarray(v0, dtype=float)

    def pos(t):
        t = np.asarray(t, dtype=float)[..., None]
        return np.cos(speed * t) * x0 + np.sin(speed * t) * v0

    def vel(t):
        t = np.asarray(t, dtype=float)[..., None]
        return speed * (-np.sin(speed * t) * x0 + np.cos(speed * t) * v0)

    return pos, vel


def latitude_curve(colatitude: float = np.pi / 3, omega: float = 2 * np.pi):
    """Circle of constant colatitude on the unit sphere, counterclockwise about e3."""
    s, c = np.sin(colatitude), np.cos(colatitude)

    def pos(t):
        t = np.asarray(t, dtype=float)
        return np.stack([s * np.cos(omega * t), s * np.sin(omega * t), np.full_like(t, c)], axis=-1)

    def vel(t):
        t = np.asarray(t, dtype=float)
        return np.stack([-s * omega * np.sin(omega * t), s * omega * np.cos(omega * t), np.zeros_like(t)], axis=-1)

    return pos, vel


# -- rough path drivers ---------------------------------------------------


def line(direction, n: int, T: float = 1.0, p: float = DEFAULT_P, start=None) -> GridRoughPath:
    return sample_lift(line_curve(direction, start)[0], n, T, p)


def circle(n: int, T: float = 1.0, radius: float = 1.0, turns: float = 1.0, p: float = DEFAULT_P, lift: str = "exact") -> GridRoughPath:
    return _lift(planar_circle_curve(radius, 2 * np.pi * turns / T), n, T, p, lift)


def lissajous(n: int, T: float = 1.0, p: float = DEFAULT_P, lift: str = "exact", **kw) -> GridRoughPath:
    return _lift(lissajous_curve(**kw), n, T, p, lift)


def great_circle(n: int, T: float = 1.0, speed: float = 1.0, p: float = DEFAULT_P, x0=(1.0, 0.0, 0.0), v0=(0.0, 1.0, 0.0), lift: str = "exact") -> GridRoughPath:
    return _lift(great_circle_curve(x0, v0, speed), n, T, p, lift)


def latitude(n: int, colatitude: float = np.pi / 3, T: float = 1.0, p: float = DEFAULT_P, lift: str = "exact") -> GridRoughPath:
    return _lift(latitude_curve(colatitude, 2 * np.pi / T), n, T, p, lift)


def pure_area(v, w, n: int, T: float = 1.0, p: float = DEFAULT_P) -> GridRoughPath:
    return pure_area_path(v, w, uniform_grid(n, T), p)


def brownian_samples(seed: int, n: int, T: float = 1.0, dim: int = 2, scale: float = 1.0) -> np.ndarray:
    """Fixed-seed Gaussian walk with n steps, starting at the origin."""
    rng = np.random.default_rng(seed)
    inc = rng.normal(scale=scale * np.sqrt(T / n), size=(n, dim))
    return np.concatenate([np.zeros((1, dim)), np.cumsum(inc, axis=0)], axis=0)


# Brownian paths have finite p-variation only for p > 2, and the windowed
# ~= tests lose to the log factor of Levy's modulus when 3/p is close to 3/2.
BROWNIAN_P = 2.7


def brownian(seed: int, n: int, T: float = 1.0, dim: int = 2, p: float = BROWNIAN_P, scale: float = 1.0, subsample: int = 1) -> GridRoughPath:
    """Piecewise-linear lift of a Gaussian walk; ``subsample`` keeps every k-th point."""
    walk = brownian_samples(seed, n * subsample, T, dim, scale)[::subsample]
    return signature_lift(uniform_grid(n, T), walk, p)
