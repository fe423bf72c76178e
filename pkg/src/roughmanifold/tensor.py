"""Level-2 truncated tensor algebra and rough paths stored on time grids.

A rough path over a grid t_0 < ... < t_n is stored as its trace values and
the level-2 increments over consecutive intervals.  Increments over any
other pair of grid times are recovered through the Chen identity, so Chen
holds by construction and never has to be enforced.

Level-2 tensors are plain ``(N, N)`` arrays; the tensor norm is Frobenius.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import (
    DimensionError,
    EndpointMismatchError,
    OffGridError,
    SewingDivergence,
    UsageError,
)

DEFAULT_P = 2.1


# ---------------------------------------------------------------------------
# T2 elements
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class T2Element:
    """Element 1 + x + X of the truncated tensor algebra."""

    level1: np.ndarray
    level2: np.ndarray

    def __post_init__(self):
        l1 = np.asarray(self.level1, dtype=float).reshape(-1)
        l2 = np.asarray(self.level2, dtype=float)
        if l2.shape != (l1.size, l1.size):
            raise DimensionError(f"level2 shape {l2.shape} does not match dim {l1.size}")
        object.__setattr__(self, "level1", l1)
        object.__setattr__(self, "level2", l2)

    @property
    def dim(self) -> int:
        return self.level1.size

    @classmethod
    def identity(cls, dim: int) -> "T2Element":
        return cls(np.zeros(dim), np.zeros((dim, dim)))

    def __mul__(self, other: "T2Element") -> "T2Element":
        return t2_mul(self, other)

    def inverse(self) -> "T2Element":
        x = self.level1
        return T2Element(-x, -self.level2 + np.outer(x, x))

    @property
    def sym(self) -> np.ndarray:
        return 0.5 * (self.level2 + self.level2.T)

    @property
    def antisym(self) -> np.ndarray:
        return 0.5 * (self.level2 - self.level2.T)

    def allclose(self, other: "T2Element", atol: float = 1e-12) -> bool:
        return bool(
            np.allclose(self.level1, other.level1, rtol=0, atol=atol)
            and np.allclose(self.level2, other.level2, rtol=0, atol=atol)
        )


def t2_mul(a: T2Element, b: T2Element) -> T2Element:
    """(1+x+X)(1+y+Y) = 1 + (x+y) + (X + x(x)y + Y)."""
    if a.dim != b.dim:
        raise DimensionError(f"cannot multiply T2 elements of dims {a.dim} and {b.dim}")
    return T2Element(a.level1 + b.level1, a.level2 + np.outer(a.level1, b.level1) + b.level2)


def batch_mul(a1, a2, b1, b2):
    """Vectorised product of stacks of T2 elements given by their levels."""
    return a1 + b1, a2 + b2 + a1[..., :, None] * b1[..., None, :]


def fold_product(l1: np.ndarray, l2: np.ndarray):
    """Ordered product along axis -2 (level 1) / -3 (level 2) by tree reduction.

    ``l1`` has shape (..., m, W) and ``l2`` (..., m, W, W) with m a power of two.
    """
    while l1.shape[-2] > 1:
        if l1.shape[-2] % 2:
            raise UsageError("fold_product needs a power-of-two number of factors")
        l1, l2 = batch_mul(l1[..., 0::2, :], l2[..., 0::2, :, :], l1[..., 1::2, :], l2[..., 1::2, :, :])
    return l1[..., 0, :], l2[..., 0, :, :]


# ---------------------------------------------------------------------------
# Controls
# ---------------------------------------------------------------------------


def pvar_dp(values: np.ndarray, p: float) -> np.ndarray:
    """p-variation (raised to p) of a sampled path from its first sample.

    Returns ``v`` with ``v[j]`` the supremum over grid partitions of
    [t_0, t_j] of sum |x_{t_i t_{i+1}}|^p.
    """
    values = np.asarray(values, dtype=float)
    n = values.shape[0]
    v = np.zeros(n)
    for j in range(1, n):
        d = np.linalg.norm(values[j] - values[:j], axis=-1) ** p
        v[j] = np.max(v[:j] + d)
    return v


class Control:
    """A control function omega(s, t) on [t_0, T].

    Two kinds are provided: ``uniform`` (kappa * (t - s)) and ``pvar``,
    the empirical p-variation of a sampled trace raised to the power p.
    """

    def __init__(self, kind: str = "uniform", kappa: float = 1.0, grid=None, values=None, p: float = DEFAULT_P):
        if kind not in ("uniform", "pvar"):
            raise UsageError(f"unknown control kind {kind!r}")
        if kind == "uniform" and not (kappa > 0 and math.isfinite(kappa)):
            raise UsageError("uniform control needs a positive finite kappa")
        self.kind = kind
        self.kappa = float(kappa)
        self.p = float(p)
        self._grid = None if grid is None else np.asarray(grid, dtype=float)
        self._values = None if values is None else np.asarray(values, dtype=float)
        self._rows: dict[int, np.ndarray] = {}
        if kind == "pvar" and (self._grid is None or self._values is None):
            raise UsageError("pvar control needs the grid and trace values")

    @classmethod
    def uniform(cls, kappa: float) -> "Control":
        return cls("uniform", kappa=kappa)

    @classmethod
    def empirical(cls, grid, values, p: float) -> "Control":
        return cls("pvar", grid=grid, values=values, p=p)

    def _row(self, i: int) -> np.ndarray:
        if i not in self._rows:
            self._rows[i] = pvar_dp(self._values[i:], self.p)
        return self._rows[i]

    def __call__(self, s, t):
        s = np.asarray(s, dtype=float)
        t = np.asarray(t, dtype=float)
        if self.kind == "uniform":
            return self.kappa * (t - s)
        si = np.searchsorted(self._grid, s)
        ti = np.searchsorted(self._grid, t)
        out = np.empty(np.broadcast(si, ti).shape)
        for idx, (a, b) in enumerate(zip(np.broadcast_to(si, out.shape).ravel(), np.broadcast_to(ti, out.shape).ravel())):
            out.flat[idx] = self._row(int(a))[int(b) - int(a)] if b > a else 0.0
        return out if out.ndim else float(out)

    def descriptor(self) -> dict:
        if self.kind == "uniform":
            return {"kind": "uniform", "kappa": self.kappa}
        return {"kind": "pvar", "p": self.p}

    def __repr__(self):
        if self.kind == "uniform":
            return f"Control(uniform, kappa={self.kappa:.6g})"
        return f"Control(pvar, p={self.p})"


def default_kappa(grid, values, step2, p: float) -> float:
    """kappa such that kappa*(T - t0) equals the trace p-variation to the p.

    A trace with zero variation (a pure-area path, say) falls back to the
    level-2 scale |X_{0,T}|^{p/2}, and to 1 if that vanishes too.
    """
    span = grid[-1] - grid[0]
    v = pvar_dp(values, p)[-1]
    if v <= 1e-300:
        rel = values - values[0]
        delta = np.diff(values, axis=0)
        total = step2.sum(axis=0) + np.einsum("ki,kj->ij", rel[:-1], delta)
        v = np.linalg.norm(total) ** (p / 2)
    if v <= 1e-300:
        return 1.0
    return float(v / span)


# ---------------------------------------------------------------------------
# Grid rough paths
# ---------------------------------------------------------------------------


class GridRoughPath:
    """A level-2 rough path sampled on a strictly increasing time grid.

    Parameters
    ----------
    grid : (n+1,) times
    values : (n+1, N) trace samples
    step2 : (n, N, N) level-2 increments over [t_k, t_{k+1}]
    p : roughness exponent in [2, 3)
    control : Control, defaults to a uniform control fitted to the trace
    """

    def __init__(self, grid, values, step2, p: float = DEFAULT_P, control: Control | None = None):
        grid = np.array(grid, dtype=float)
        values = np.array(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        n = grid.size - 1
        if grid.ndim != 1 or n < 0:
            raise DimensionError("grid must be a 1-d array")
        if n >= 1 and not np.all(np.diff(grid) > 0):
            raise UsageError("grid must be strictly increasing")
        N = values.shape[1]
        step2 = np.array(step2, dtype=float).reshape(n, N, N) if n else np.zeros((0, N, N))
        if values.shape[0] != n + 1:
            raise DimensionError(f"{values.shape[0]} values for {n + 1} grid points")
        if not (2.0 <= p < 3.0):
            raise UsageError(f"p must lie in [2, 3), got {p}")
        if not (np.all(np.isfinite(values)) and np.all(np.isfinite(step2))):
            raise UsageError("non-finite entries in rough path data")
        for a in (grid, values, step2):
            a.setflags(write=False)
        self.grid = grid
        self.values = values
        self.step2 = step2
        self.p = float(p)
        self._control = control
        self._prefix = None

    # -- basic accessors ---------------------------------------------------

    @property
    def n_steps(self) -> int:
        return self.grid.size - 1

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def T(self) -> float:
        return float(self.grid[-1])

    @property
    def control(self) -> Control:
        if self._control is None:
            if self.n_steps == 0:
                self._control = Control.uniform(1.0)
            else:
                self._control = Control.uniform(default_kappa(self.grid, self.values, self.step2, self.p))
        return self._control

    def with_control(self, control: Control) -> "GridRoughPath":
        return GridRoughPath(self.grid, self.values, self.step2, self.p, control)

    def with_p(self, p: float) -> "GridRoughPath":
        return GridRoughPath(self.grid, self.values, self.step2, p, self._control)

    @property
    def deltas(self) -> np.ndarray:
        return np.diff(self.values, axis=0)

    def step(self, k: int) -> T2Element:
        return T2Element(self.values[k + 1] - self.values[k], self.step2[k])

    def index_of(self, t: float) -> int:
        i = int(np.searchsorted(self.grid, t))
        for j in (i - 1, i):
            if 0 <= j <= self.n_steps and abs(self.grid[j] - t) <= 1e-12 * max(1.0, abs(t)):
                return j
        raise OffGridError(f"time {t} is not a grid point")

    # -- Chen reconstruction ----------------------------------------------

    def _prefix_arrays(self):
        if self._prefix is None:
            rel = self.values - self.values[0]
            d = self.deltas
            C = np.zeros((self.n_steps + 1, self.dim, self.dim))
            if self.n_steps:
                C[1:] = np.cumsum(self.step2 + rel[:-1, :, None] * d[:, None, :], axis=0)
            self._prefix = (rel, C)
        return self._prefix

    def pair_increments(self, i, j):
        """Level 1 and level 2 of X_{t_i, t_j} for index arrays i <= j."""
        i = np.asarray(i)
        j = np.asarray(j)
        rel, C = self._prefix_arrays()
        l1 = self.values[j] - self.values[i]
        l2 = C[j] - C[i] - rel[i][..., :, None] * l1[..., None, :]
        return l1, l2

    def increment_idx(self, i: int, j: int) -> T2Element:
        if i > j:
            raise UsageError("increments need s <= t")
        l1, l2 = self.pair_increments(i, j)
        return T2Element(l1, l2)

    def increment(self, s: float, t: float) -> T2Element:
        return self.increment_idx(self.index_of(s), self.index_of(t))

    def level2_table(self) -> np.ndarray:
        """Dense (n+1, n+1, N, N) table of X_{t_i, t_j} (zero below the diagonal)."""
        n = self.n_steps
        ii, jj = np.triu_indices(n + 1)
        out = np.zeros((n + 1, n + 1, self.dim, self.dim))
        out[ii, jj] = self.pair_increments(ii, jj)[1]
        return out

    # -- interpolation inside grid intervals ------------------------------

    def sub_increments(self, k, lam0, lam1):
        """Log-linear increments over fractions [lam0, lam1] of interval k.

        Inside [t_k, t_{k+1}] the path is continued as the one-parameter
        subgroup exp(lam (x + A)) with A = X_k - x(x)x/2.  This is the unique
        geodesic refinement compatible with Chen and weak geometricity; for
        signatures of piecewise-linear paths it is the linear segment.
        """
        k = np.asarray(k)
        d = self.values[k + 1] - self.values[k]
        A = self.step2[k] - 0.5 * d[..., :, None] * d[..., None, :]
        dl = np.asarray(lam1, dtype=float) - np.asarray(lam0, dtype=float)
        l1 = dl[..., None] * d
        l2 = dl[..., None, None] * A + 0.5 * (dl**2)[..., None, None] * d[..., :, None] * d[..., None, :]
        return l1, l2

    def sub_values(self, k, lam):
        k = np.asarray(k)
        lam = np.asarray(lam, dtype=float)
        return self.values[k] + lam[..., None] * (self.values[k + 1] - self.values[k])

    def refine(self, m: int) -> "GridRoughPath":
        """Split every grid interval into m equal sub-intervals (log-linear)."""
        if m == 1:
            return self
        n = self.n_steps
        k = np.repeat(np.arange(n), m)
        j = np.tile(np.arange(m), n)
        lam0, lam1 = j / m, (j + 1) / m
        _, l2 = self.sub_increments(k, lam0, lam1)
        vals = np.concatenate([self.sub_values(k, lam0), self.values[-1:]], axis=0)
        dt = np.diff(self.grid)
        grid = np.concatenate([self.grid[k] + lam0 * dt[k], self.grid[-1:]])
        return GridRoughPath(grid, vals, l2, self.p, self._control)

    # -- structural ops ---------------------------------------------------

    def restrict(self, i0: int, i1: int) -> "GridRoughPath":
        return GridRoughPath(self.grid[i0 : i1 + 1], self.values[i0 : i1 + 1], self.step2[i0:i1], self.p, self._control)

    def translate(self, c) -> "GridRoughPath":
        return GridRoughPath(self.grid, self.values + np.asarray(c, dtype=float), self.step2, self.p, self._control)

    def linear_map(self, L) -> "GridRoughPath":
        """Push forward by a linear map: (Lx, (L(x)L) X)."""
        L = np.atleast_2d(np.asarray(L, dtype=float))
        return GridRoughPath(
            self.grid, self.values @ L.T, np.einsum("ia,kab,jb->kij", L, self.step2, L), self.p, self._control
        )

    def signature_T2(self) -> T2Element:
        return self.increment_idx(0, self.n_steps)

    def __repr__(self):
        return f"GridRoughPath(n_steps={self.n_steps}, dim={self.dim}, T=[{self.grid[0]:g},{self.grid[-1]:g}], p={self.p})"


# ---------------------------------------------------------------------------
# Constructors
# ---------------------------------------------------------------------------


def signature_lift(times, values, p: float = DEFAULT_P, control: Control | None = None) -> GridRoughPath:
    """Level-2 signature of the piecewise-linear interpolation of samples."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if times.size < 2 or values.shape[0] < 2:
        raise UsageError("signature_lift needs at least two samples")
    d = np.diff(values, axis=0)
    return GridRoughPath(times, values, 0.5 * d[:, :, None] * d[:, None, :], p, control)


def pure_area_path(v, w, grid, p: float = DEFAULT_P, control: Control | None = None) -> GridRoughPath:
    """Zero trace with level 2 (v(x)w - w(x)v)(t - s)."""
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    grid = np.asarray(grid, dtype=float)
    if v.shape != w.shape:
        raise DimensionError("v and w must have the same dimension")
    area = np.outer(v, w) - np.outer(w, v)
    dt = np.diff(grid)
    vals = np.zeros((grid.size, v.size))
    return GridRoughPath(grid, vals, dt[:, None, None] * area, p, control)


def constant_path(x0, grid, p: float = DEFAULT_P) -> GridRoughPath:
    x0 = np.asarray(x0, dtype=float)
    grid = np.asarray(grid, dtype=float)
    n = grid.size - 1
    return GridRoughPath(grid, np.tile(x0, (n + 1, 1)), np.zeros((n, x0.size, x0.size)), p, Control.uniform(1.0))


# ---------------------------------------------------------------------------
# Defect reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DefectReport:
    """Measured constants for an exact identity or for a ``~=`` claim.

    For ``~=`` claims, ``constants[j]`` is the largest |defect|/omega^{3/p}
    over grid pairs whose index gap lies in the dyadic band (2^{j-1}, 2^j],
    ``windows[j]`` the corresponding time scale, and ``slope`` the
    least-squares exponent of log C against log delta.  For exact
    identities only ``max_defect`` is meaningful.
    """

    name: str
    max_defect: float
    windows: tuple = ()
    constants: tuple = ()
    slope: float = 0.0
    kind: str = "asymptotic"
    tolerance: float = 0.0
    slope_threshold: float = -0.05
    cap: float = 1e3
    worst: tuple | None = None

    @property
    def passed(self) -> bool:
        if self.kind == "exact":
            return self.max_defect <= self.tolerance
        if not self.constants:
            return True
        return self.slope >= self.slope_threshold and max(self.constants) <= self.cap

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["passed"] = self.passed
        d["windows"] = list(self.windows)
        d["constants"] = list(self.constants)
        d["worst"] = None if self.worst is None else [int(w) for w in self.worst]
        return d

    def summary(self) -> str:
        verdict = "pass" if self.passed else "FAIL"
        if self.kind == "exact":
            return f"{self.name}: max defect {self.max_defect:.3e} (tol {self.tolerance:.1e}) {verdict}"
        cs = ", ".join(f"{c:.3e}" for c in self.constants)
        return f"{self.name}: C=[{cs}] slope {self.slope:+.3f} {verdict}"


def fit_slope(x, y) -> float:
    """Least-squares slope of log y against log x."""
    lx = np.log(np.asarray(x, dtype=float))
    ly = np.log(np.asarray(y, dtype=float))
    if lx.size < 2:
        return 0.0
    return float(np.polyfit(lx, ly, 1)[0])


def window_report(
    name: str,
    path: GridRoughPath,
    defect: Callable[[np.ndarray, np.ndarray], np.ndarray],
    n_bands: int = 4,
    floor: float = 1e-8,
    slope_threshold: float = -0.05,
    cap: float = 1e3,
    atol: float = 0.0,
) -> DefectReport:
    """Band-windowed ~= report for ``defect(i, j)`` evaluated on index pairs.

    ``defect`` receives index arrays and returns an array whose leading axis
    enumerates the pairs; the Frobenius norm is taken over the rest.
    Constants below ``floor`` are clamped so rounding noise reads as flat;
    defects with norm at most ``atol`` count as exactly zero, for quantities
    that vanish identically and only carry discretization noise.
    """
    n = path.n_steps
    omega = path.control
    p = path.p
    h = (path.grid[-1] - path.grid[0]) / max(n, 1)
    windows, consts = [], []
    worst, worst_val = None, -1.0
    max_def = 0.0
    lo = 0
    for j in range(n_bands):
        hi = 2**j
        if hi > n:
            break
        best = 0.0
        for g in range(lo + 1, hi + 1):
            i = np.arange(0, n - g + 1)
            jj = i + g
            vals = np.asarray(defect(i, jj), dtype=float)
            norms = np.sqrt(np.sum(vals.reshape(vals.shape[0], -1) ** 2, axis=1))
            norms = np.where(norms <= atol, 0.0, norms)
            w = omega(path.grid[i], path.grid[jj])
            ratio = np.where(w > 0, norms / np.maximum(w, 1e-300) ** (3.0 / p), np.where(norms > 0, np.inf, 0.0))
            if norms.size:
                max_def = max(max_def, float(norms.max()))
                k = int(np.argmax(ratio))
                if ratio[k] > best:
                    best = float(ratio[k])
                if ratio[k] > worst_val:
                    worst_val, worst = float(ratio[k]), (int(i[k]), int(jj[k]))
        windows.append(hi * h)
        consts.append(max(best, floor))
        lo = hi
    slope = fit_slope(windows, consts) if len(windows) >= 2 else 0.0
    return DefectReport(
        name=name,
        max_defect=max_def,
        windows=tuple(windows),
        constants=tuple(consts),
        slope=slope,
        kind="asymptotic",
        slope_threshold=slope_threshold,
        cap=cap,
        worst=worst,
    )


# ---------------------------------------------------------------------------
# Exact identities
# ---------------------------------------------------------------------------


def chen_defect(x, level2, tol: float = 1e-12) -> DefectReport:
    """Chen defect over all grid triples of a two-parameter level-2 table.

    ``x`` are trace samples (n+1, N); ``level2`` is either the dense table
    X[i, j] of candidate increments for grid pairs, shape (n+1, n+1, N, N),
    or per-interval increments (n, N, N), in which case the pair table is
    built by Chen folding and only floating-point error can show up.
    """
    x = np.asarray(x, dtype=float)
    level2 = np.asarray(level2, dtype=float)
    n = x.shape[0] - 1
    if level2.ndim == 3:
        if level2.shape[0] != n:
            raise DimensionError("per-interval level 2 must have n entries")
        return path_chen_defect(GridRoughPath(np.arange(n + 1.0), x, level2, DEFAULT_P, Control.uniform(1.0)), tol)
    if level2.shape[:2] != (n + 1, n + 1):
        raise DimensionError("pair table must be (n+1, n+1, N, N)")
    worst, best = None, 0.0
    for s in range(n + 1):
        for t in range(s + 2, n + 1):
            u = np.arange(s + 1, t)
            xsu = x[u] - x[s]
            xut = x[t] - x[u]
            d = level2[s, t] - level2[s, u] - level2[u, t] - xsu[:, :, None] * xut[:, None, :]
            norms = np.sqrt(np.sum(d**2, axis=(1, 2)))
            k = int(np.argmax(norms))
            if norms[k] > best:
                best, worst = float(norms[k]), (s, int(u[k]), t)
    return DefectReport("chen", best, kind="exact", tolerance=tol, worst=worst)


def _triple_defect(path: GridRoughPath, s, u, t):
    l_st = path.pair_increments(s, t)
    l_su = path.pair_increments(s, u)
    l_ut = path.pair_increments(u, t)
    d = l_st[1] - l_su[1] - l_ut[1] - l_su[0][:, :, None] * l_ut[0][:, None, :]
    d1 = l_st[0] - l_su[0] - l_ut[0]
    return np.sqrt(np.sum(d**2, axis=(1, 2)) + np.sum(d1**2, axis=1))


def path_chen_defect(path: GridRoughPath, tol: float = 1e-12, n_random: int = 20000, seed: int = 0) -> DefectReport:
    """Chen defect of a grid path's reconstructed pair increments.

    Small grids are checked on every triple.  Large grids are checked on all
    consecutive triples, on every dyadic (s, midpoint, t) triple, on all
    triples of a strided subgrid of about 48 points and on ``n_random``
    random triples.
    """
    n = path.n_steps
    if n < 2:
        return DefectReport("chen", 0.0, kind="exact", tolerance=tol)
    if n <= 48:
        s, u, t = [a.ravel() for a in np.meshgrid(*(np.arange(n + 1),) * 3, indexing="ij")]
        keep = (s < u) & (u < t)
        s, u, t = s[keep], u[keep], t[keep]
    else:
        parts = []
        k = np.arange(n - 1)
        parts.append((k, k + 1, k + 2))
        size = 2
        while size <= n:
            st = np.arange(0, n - size + 1, size)
            parts.append((st, st + size // 2, st + size))
            size *= 2
        sub = np.unique(np.linspace(0, n, 48).round().astype(int))
        a, b, c = np.meshgrid(sub, sub, sub, indexing="ij")
        keep = (a < b) & (b < c)
        parts.append((a[keep], b[keep], c[keep]))
        rng = np.random.default_rng(seed)
        r = np.sort(rng.integers(0, n + 1, size=(n_random, 3)), axis=1)
        keep = (r[:, 0] < r[:, 1]) & (r[:, 1] < r[:, 2])
        parts.append((r[keep, 0], r[keep, 1], r[keep, 2]))
        s = np.concatenate([q[0] for q in parts])
        u = np.concatenate([q[1] for q in parts])
        t = np.concatenate([q[2] for q in parts])
    best, worst = 0.0, None
    for lo in range(0, s.size, 50000):
        sl = slice(lo, lo + 50000)
        norms = _triple_defect(path, s[sl], u[sl], t[sl])
        k = int(np.argmax(norms))
        if norms[k] > best:
            best, worst = float(norms[k]), (int(s[sl][k]), int(u[sl][k]), int(t[sl][k]))
    return DefectReport("chen", best, kind="exact", tolerance=tol, worst=worst)


def _rows(X: GridRoughPath):
    """Yield (i, level1, level2) for X_{t_i, t_j}, j > i, one row at a time."""
    rel, C = X._prefix_arrays()
    for i in range(X.n_steps):
        l1 = X.values[i + 1 :] - X.values[i]
        l2 = C[i + 1 :] - C[i] - rel[i][:, None] * l1[:, None, :]
        yield i, l1, l2


def weak_geometricity_defect(X: GridRoughPath, tol: float = 1e-12) -> DefectReport:
    """max over grid pairs of |Sym(X_{s,t}) - x_{s,t}(x)x_{s,t}/2|."""
    best, worst = 0.0, None
    for i, l1, l2 in _rows(X):
        d = 0.5 * (l2 + np.swapaxes(l2, -1, -2)) - 0.5 * l1[:, :, None] * l1[:, None, :]
        norms = np.einsum("kab,kab->k", d, d)
        k = int(np.argmax(norms))
        if norms[k] > best:
            best, worst = float(norms[k]), (i, i + 1 + k)
    return DefectReport("weak_geometricity", math.sqrt(best), kind="exact", tolerance=tol, worst=worst)


def rough_distance(X: GridRoughPath, Y: GridRoughPath, control: Control | None = None, p: float | None = None) -> float:
    """Inhomogeneous rough path distance on a common grid.

    sup |x_{s,t} - y_{s,t}| / omega^{1/p} + sup |X_{s,t} - Y_{s,t}| / omega^{2/p}
    with both suprema over grid pairs.
    """
    if X.grid.shape != Y.grid.shape or not np.allclose(X.grid, Y.grid, rtol=0, atol=1e-12):
        raise DimensionError("rough_distance needs paths on the same grid")
    if X.dim != Y.dim:
        raise DimensionError("rough_distance needs paths of the same dimension")
    omega = control if control is not None else X.control
    p = X.p if p is None else p
    s1 = s2 = 0.0
    for (i, a1, a2), (_, b1, b2) in zip(_rows(X), _rows(Y)):
        w = np.maximum(omega(X.grid[i], X.grid[i + 1 :]), 1e-300)
        e1 = a1 - b1
        e2 = a2 - b2
        d1 = np.sqrt(np.einsum("ka,ka->k", e1, e1))
        d2 = np.sqrt(np.einsum("kab,kab->k", e2, e2))
        s1 = max(s1, float(np.max(d1 / w ** (1.0 / p))))
        s2 = max(s2, float(np.max(d2 / w ** (2.0 / p))))
    return s1 + s2


def homogeneous_pvar_norm(X: GridRoughPath, lo: int = 0, hi: int | None = None) -> float:
    """Measured p-variation of the trace on grid indices [lo, hi]."""
    hi = X.n_steps if hi is None else hi
    return float(pvar_dp(X.values[lo : hi + 1], X.p)[-1] ** (1.0 / X.p))


# ---------------------------------------------------------------------------
# Sewing
# ---------------------------------------------------------------------------


@dataclass
class SewLog:
    rounds: int = 0
    cauchy: list = field(default_factory=list)
    converged: bool = False
    capped: bool = False

    def to_dict(self) -> dict:
        return {"rounds": self.rounds, "cauchy": [float(c) for c in self.cauchy], "converged": self.converged, "capped": self.capped}


Candidate = Callable[[np.ndarray, np.ndarray, np.ndarray], tuple]


def sew(
    candidate: Candidate,
    grid,
    x0=None,
    p: float = DEFAULT_P,
    tol: float = 1e-13,
    max_rounds: int = 20,
    max_evals: int = 2**22,
    extrapolate: bool = True,
    control: Control | None = None,
    return_log: bool = False,
):
    """Sew an almost-multiplicative functional into a grid rough path.

    ``candidate(k, lam0, lam1)`` returns level 1 (m, W) and level 2
    (m, W, W) of the candidate increment over the fraction [lam0, lam1] of
    grid interval k (all arguments are arrays of length m).  Each coarse
    interval is replaced by the ordered product of its 2^r dyadic children
    for r = 0, 1, ... until successive values agree to ``tol`` (relative to
    the size of the increment).  Successive refinements are combined by a
    Richardson table in powers of the child length, which is valid because
    candidates are smooth in the child length inside one grid interval.
    """
    grid = np.asarray(grid, dtype=float)
    n = grid.size - 1
    if n < 1:
        raise UsageError("sew needs at least one grid interval")
    log = SewLog()
    table: list[list[tuple]] = []
    raw_d: list[float] = []
    result = None
    for r in range(max_rounds + 1):
        m = 2**r
        if r > 0 and n * m > max_evals:
            log.capped = True
            break
        k = np.repeat(np.arange(n), m)
        j = np.tile(np.arange(m), n)
        l1, l2 = candidate(k, j / m, (j + 1) / m)
        l1 = np.asarray(l1, dtype=float)
        l2 = np.asarray(l2, dtype=float)
        W = l1.shape[-1]
        S = fold_product(l1.reshape(n, m, W), l2.reshape(n, m, W, W))
        row = [S]
        for c in range(1, r + 1):
            fac = 2.0**c - 1.0
            prev = table[r - 1][c - 1]
            cur = row[c - 1]
            row.append((cur[0] + (cur[0] - prev[0]) / fac, cur[1] + (cur[1] - prev[1]) / fac))
        table.append(row)
        log.rounds = r
        if r == 0:
            continue
        scale = 1.0 + max(np.abs(S[0]).max(), np.abs(S[1]).max())
        prev0 = table[r - 1][0]
        dr = _level_diff(S, prev0)
        raw_d.append(float(dr.max()))
        best = row[-1] if extrapolate else S
        prev_best = table[r - 1][-1] if extrapolate else prev0
        d = _level_diff(best, prev_best)
        log.cauchy.append(float(d.max()))
        if r == 1 and raw_d[-1] <= tol * scale:
            result = table[0][0]
            log.converged = True
            break
        if d.max() <= tol * scale:
            result = best
            log.converged = True
            break
        if len(raw_d) >= 3 and raw_d[-1] > 1e-8 * scale and raw_d[-1] > 0.9 * raw_d[-2] and raw_d[-2] > 0.9 * raw_d[-3]:
            worst = int(np.argmax(dr))
            raise SewingDivergence(
                f"sewing refinement is not Cauchy on interval {worst} [{grid[worst]:g}, {grid[worst + 1]:g}]; "
                f"successive differences {raw_d[-3]:.3e}, {raw_d[-2]:.3e}, {raw_d[-1]:.3e}",
                worst_interval=worst,
            )
        # stop once rounding noise dominates: the table no longer improves
        if len(log.cauchy) >= 3 and log.cauchy[-1] >= log.cauchy[-2] >= log.cauchy[-3] and log.cauchy[-1] < 1e-10 * scale:
            break
    if result is None:
        result = table[-1][-1] if extrapolate else table[-1][0]
    l1, l2 = result
    W = l1.shape[-1]
    x0 = np.zeros(W) if x0 is None else np.asarray(x0, dtype=float)
    values = np.concatenate([x0[None, :], x0 + np.cumsum(l1, axis=0)], axis=0)
    out = GridRoughPath(grid, values, l2, p, control)
    if return_log:
        return out, log
    return out


def _level_diff(a, b):
    d1 = np.abs(a[0] - b[0]).reshape(a[0].shape[0], -1).max(axis=1)
    d2 = np.abs(a[1] - b[1]).reshape(a[1].shape[0], -1).max(axis=1)
    return np.maximum(d1, d2)


def concatenate(pieces: Sequence[GridRoughPath], x0=None, atol: float = 1e-10) -> GridRoughPath:
    """Join paths on abutting intervals into one grid path.

    Piece k must end at the time and trace value where piece k+1 starts.
    If ``x0`` is given the result is translated to start there.
    """
    if not pieces:
        raise UsageError("nothing to concatenate")
    pieces = list(pieces)
    if len(pieces) == 1:
        out = pieces[0]
    else:
        grids, vals, s2 = [pieces[0].grid], [pieces[0].values], [pieces[0].step2]
        for a, b in zip(pieces[:-1], pieces[1:]):
            if a.dim != b.dim:
                raise DimensionError("pieces have different dimensions")
            if abs(a.grid[-1] - b.grid[0]) > 1e-12 * max(1.0, abs(b.grid[0])):
                raise EndpointMismatchError(f"time gap between pieces at {a.grid[-1]} and {b.grid[0]}")
            gap = float(np.linalg.norm(a.values[-1] - b.values[0]))
            if gap > atol:
                raise EndpointMismatchError(f"trace mismatch {gap:.3e} at t={b.grid[0]:g}")
            grids.append(b.grid[1:])
            vals.append(b.values[1:])
            s2.append(b.step2)
        out = GridRoughPath(np.concatenate(grids), np.concatenate(vals), np.concatenate(s2), pieces[0].p)
    if x0 is not None:
        out = out.translate(np.asarray(x0, dtype=float) - out.values[0])
    return out
