"""Parallel translation on O(M), rough rolling and unrolling, smooth oracles.

A frame u = (x, g) is stored flat as [x, g column-major] (see FrameBundle).
All vector fields below are ambient representatives that are tangent to
O(M) along O(M); their derivatives are written out analytically from Q,
dQ and d2Q of the base manifold.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .calculus import OneFormE, RdeConfig, SmoothMap, integrate_one_form, pushforward_flat
from .constrained import ManifoldRoughPath, as_path, skew_basis, solve_constrained_rde
from .errors import ConditioningError, DimensionError, OffManifoldError, UsageError
from .io import path_to_dict
from .manifolds import EmbeddedManifold, FrameBundle, ManifoldVectorFieldFamily, frame_bundle
from .tensor import DefectReport, GridRoughPath, window_report


def _col(a, N, d):
    """(..., N, d) -> (..., N d) column-major."""
    return np.swapaxes(a, -1, -2).reshape(a.shape[:-2] + (N * d,))


def _uncol(v, N, d):
    return np.swapaxes(v.reshape(v.shape[:-1] + (d, N)), -1, -2)


class _FrameFamily(ManifoldVectorFieldFamily):
    """A field family on O(M) given by columns and their directional derivatives.

    ``columns(x, g)`` returns (xi, h) with shapes (..., n, N) and (..., n, N, d);
    ``directional(x, g, dx, dg)`` returns the derivative of the columns along
    the tangent vector (dx, dg), same shapes.  ``dx``/``dg`` may carry an
    extra axis in front of the point axes.
    """

    def __init__(self, OM: FrameBundle, n: int, columns, directional):
        self.OM = OM
        self.base = OM.base
        self.N, self.d = OM.nb, OM.db
        self._columns = columns
        self._directional = directional
        super().__init__(OM, n, self._matrix, None, self._second)

    def _stack(self, xi, h):
        cols = np.concatenate([xi, _col(h, self.N, self.d)], axis=-1)  # (..., n, NG)
        return np.swapaxes(cols, -1, -2)

    def _matrix(self, u):
        x, g = self.OM.split(u)
        xi, h = self._columns(x, g)
        return self._stack(xi, h)

    def _second(self, u, ZZ):
        x, g = self.OM.split(u)
        xi, h = self._columns(x, g)  # (..., n, N), (..., n, N, d)
        # derivative of every column along every column: leading axis a
        dxi, dh = self._directional(x[..., None, :], g[..., None, :, :], xi, h)
        cols = np.concatenate([dxi, _col(dh, self.N, self.d)], axis=-1)  # (..., a, b, NG)
        return np.einsum("...abk,...ab->...k", cols, ZZ)

    def directional_matrix(self, u, v):
        """Ambient derivative of the field matrix along v (flat tangent vector)."""
        x, g = self.OM.split(u)
        dx, dg = self.OM.split(v)
        dxi, dh = self._directional(x, g, dx, dg)
        return self._stack(dxi, dh)


def _dQ(M, x, v):
    x, v = np.broadcast_arrays(x, v)
    return M.dQ(x, v)


def _d2Q(M, x, v, w):
    x, v, w = np.broadcast_arrays(x, v, w)
    if x.ndim == 1:
        return M.d2Q(x, v, w)
    flat = [M.d2Q(a, b, c) for a, b, c in zip(x.reshape(-1, x.shape[-1]), v.reshape(-1, v.shape[-1]), w.reshape(-1, w.shape[-1]))]
    return np.stack(flat).reshape(x.shape[:-1] + (x.shape[-1], x.shape[-1]))


def _d2Q_fast(M, x, v, w):
    if M._d2Q_fn is not None:
        x, v, w = np.broadcast_arrays(x, v, w)
        return M.d2Q(x, v, w)
    return _d2Q(M, x, v, w)


def horizontal_fields(OM: FrameBundle) -> _FrameFamily:
    """B_a(x, g) = (g a, -dQ(g a) g), driven by R^d."""
    M = OM.base
    d = OM.db

    def columns(x, g):
        ga = np.swapaxes(g, -1, -2)  # (..., d, N): row a is g e_a
        xb = x[..., None, :]
        h = -_dQ(M, xb, ga) @ g[..., None, :, :]
        return ga, h

    def directional(x, g, dx, dg):
        ga = np.swapaxes(g, -1, -2)  # (..., b, N)
        ha = np.swapaxes(dg, -1, -2)  # (..., b, N): dg e_b
        xb, dxb = x[..., None, :], dx[..., None, :]
        G = g[..., None, :, :]
        dGb = dg[..., None, :, :]
        dh = -_d2Q_fast(M, xb, dxb, ga) @ G - _dQ(M, xb, ha) @ G - _dQ(M, xb, ga) @ dGb
        return ha, dh

    return _FrameFamily(OM, d, columns, directional)


def vertical_fields(OM: FrameBundle) -> _FrameFamily:
    """V_A(x, g) = (0, g A) for A in so(d), driven by so(d) coordinates."""
    E = skew_basis(OM.db)
    N = OM.nb

    def columns(x, g):
        h = np.einsum("...ij,bjk->...bik", g, E)
        return np.zeros(h.shape[:-2] + (N,)), h

    def directional(x, g, dx, dg):
        h = np.einsum("...ij,bjk->...bik", dg, E)
        return np.zeros(h.shape[:-2] + (N,)), h

    return _FrameFamily(OM, E.shape[0], columns, directional)


def parallelism(OM: FrameBundle) -> _FrameFamily:
    """Y(u)(a, A) = B_a(u) + V_A(u), driven by R^d x so(d)."""
    B = horizontal_fields(OM)
    V = vertical_fields(OM)

    def columns(x, g):
        xb, hb = B._columns(x, g)
        xv, hv = V._columns(x, g)
        return np.concatenate([xb, xv], axis=-2), np.concatenate([hb, hv], axis=-3)

    def directional(x, g, dx, dg):
        xb, hb = B._directional(x, g, dx, dg)
        xv, hv = V._directional(x, g, dx, dg)
        return np.concatenate([xb, xv], axis=-2), np.concatenate([hb, hv], axis=-3)

    return _FrameFamily(OM, B.driver_dim + V.driver_dim, columns, directional)


def lifted_fields(OM: FrameBundle, W: ManifoldVectorFieldFamily) -> _FrameFamily:
    """Horizontal lift W^nabla(x, g) = (W(x), -dQ(W(x)) g) of a field family on M."""
    M = OM.base
    if W.manifold.N != M.N:
        raise DimensionError("field family lives on a different manifold")

    def columns(x, g):
        Wm = np.swapaxes(W.matrix(x), -1, -2)  # (..., n, N)
        h = -_dQ(M, x[..., None, :], Wm) @ g[..., None, :, :]
        return Wm, h

    def directional(x, g, dx, dg):
        Wm = np.swapaxes(W.matrix(x), -1, -2)
        J = W.jacobian(x)  # (..., N, n, N)
        dW = np.swapaxes(np.einsum("...ibj,...j->...ib", J, dx), -1, -2)
        xb, dxb = x[..., None, :], dx[..., None, :]
        G = g[..., None, :, :]
        dh = -_d2Q_fast(M, xb, dxb, Wm) @ G - _dQ(M, xb, dW) @ G - _dQ(M, xb, Wm) @ dg[..., None, :, :]
        return dW, dh

    return _FrameFamily(OM, W.driver_dim, columns, directional)


def transport_fields(OM: FrameBundle) -> _FrameFamily:
    """V^nabla_z(x, g) = (P z, -dQ(P z) g), driven by R^N."""
    M = OM.base
    N = M.N

    def columns(x, g):
        Pm = M.P(x)  # symmetric, rows are P e_z
        h = -_dQ(M, x[..., None, :], Pm) @ g[..., None, :, :]
        return Pm, h

    def directional(x, g, dx, dg):
        Pm = M.P(x)
        dP = -_dQ(M, x, dx)  # (..., N, N), symmetric
        xb, dxb = x[..., None, :], dx[..., None, :]
        G = g[..., None, :, :]
        Pr = np.broadcast_to(Pm, np.broadcast_shapes(Pm.shape, dP.shape))
        dh = -_d2Q_fast(M, xb, dxb, Pr) @ G - _dQ(M, xb, dP) @ G - _dQ(M, xb, Pr) @ dg[..., None, :, :]
        return dP, dh

    return _FrameFamily(OM, N, columns, directional)


# ---------------------------------------------------------------------------
# Canonical forms
# ---------------------------------------------------------------------------


def theta_form(OM: FrameBundle) -> OneFormE:
    """theta~((xi, h)_(x, g)) = g^T xi, valued in R^d (raw transpose extension)."""
    N, d = OM.nb, OM.db
    NG = OM.N
    D = np.zeros((d, NG, NG))
    for w in range(d):
        for j in range(N):
            D[w, N + w * N + j, j] = 1.0

    def value(u):
        x, g = OM.split(u)
        out = np.zeros(np.shape(u)[:-1] + (d, NG))
        out[..., :, :N] = np.swapaxes(g, -1, -2)
        return out

    return OneFormE(NG, d, value, lambda u: np.broadcast_to(D, np.shape(u)[:-1] + D.shape))


def theta_form_pinv(OM: FrameBundle) -> OneFormE:
    """Alternative extension (g^T g)^{-1} g^T xi, which agrees with theta on O(M)."""
    N, d = OM.nb, OM.db
    NG = OM.N

    def value(u):
        x, g = OM.split(u)
        out = np.zeros(np.shape(u)[:-1] + (d, NG))
        out[..., :, :N] = np.linalg.pinv(g)
        return out

    def derivative(u):
        u = np.asarray(u, dtype=float)
        if u.ndim > 1:
            return np.stack([derivative(v) for v in u.reshape(-1, NG)]).reshape(u.shape[:-1] + (d, NG, NG))
        x, g = OM.split(u)
        K = np.linalg.inv(g.T @ g)
        gp = K @ g.T
        out = np.zeros((d, NG, NG))
        for a in range(d):
            for j in range(N):
                E = np.zeros((N, d))
                E[j, a] = 1.0
                # d(pinv) = -K (E^T g + g^T E) K g^T + K E^T
                dp = -K @ (E.T @ g + g.T @ E) @ gp + K @ E.T
                out[:, N + a * N + j, :N] = dp
        return out

    return OneFormE(NG, d, value, derivative)


def omega_form(OM: FrameBundle) -> OneFormE:
    """omega~((xi, h)_(x, g)) = g^T h in so(d) coordinates (upper triangle)."""
    N, d = OM.nb, OM.db
    NG = OM.N
    iu, ju = np.triu_indices(d, 1)
    m = iu.size
    D = np.zeros((m, NG, NG))
    for k, (p, q) in enumerate(zip(iu, ju)):
        for j in range(N):
            D[k, N + p * N + j, N + q * N + j] = 1.0

    def value(u):
        x, g = OM.split(u)
        out = np.zeros(np.shape(u)[:-1] + (m, NG))
        for k, (p, q) in enumerate(zip(iu, ju)):
            out[..., k, N + q * N : N + (q + 1) * N] = g[..., :, p]
        return out

    return OneFormE(NG, m, value, lambda u: np.broadcast_to(D, np.shape(u)[:-1] + D.shape))


def theta_omega_form(OM: FrameBundle) -> OneFormE:
    th, om = theta_form(OM), omega_form(OM)
    return OneFormE(
        OM.N,
        th.dim_out + om.dim_out,
        lambda u: np.concatenate([th.value(u), om.value(u)], axis=-2),
        lambda u: np.concatenate([th.derivative(u), om.derivative(u)], axis=-3),
    )


# ---------------------------------------------------------------------------
# Frame paths
# ---------------------------------------------------------------------------


class FramePath(ManifoldRoughPath):
    """A rough path on O(M) with split access to base points and frames."""

    def __init__(self, path: GridRoughPath, OM: FrameBundle, trace_tol: float = 1e-8, check: bool = True):
        super().__init__(path, OM, trace_tol, check)
        self.OM = OM

    @property
    def base_values(self):
        return self.OM.split(self.values)[0]

    @property
    def frames(self):
        return self.OM.split(self.values)[1]

    def isometry_defect(self) -> float:
        g = self.frames
        return float(np.max(np.abs(np.swapaxes(g, -1, -2) @ g - np.eye(self.OM.db))))

    def tangency_defect(self) -> float:
        Q = self.OM.base.Q(self.base_values)
        return float(np.max(np.abs(Q @ self.frames)))

    def base_path(self) -> ManifoldRoughPath:
        """pi_* U, the projection to M (exact: pi is linear)."""
        L = np.zeros((self.OM.nb, self.OM.N))
        L[:, : self.OM.nb] = np.eye(self.OM.nb)
        X = pushforward_flat(SmoothMap.linear(L), self.path)
        return ManifoldRoughPath(X, self.OM.base)

    def to_dict(self) -> dict:
        doc = path_to_dict(self.base_path().path)
        doc["manifold"] = self.OM.base.key
        doc["frame_bundle"] = self.OM.key
        doc["frames"] = [g.tolist() for g in self.frames]
        doc["frame_path"] = path_to_dict(self.path)
        doc["horizontality"] = horizontality_defect(self).to_dict()
        return doc


def _frame_path(X: ManifoldRoughPath, OM: FrameBundle, sv_floor: float = 1e-6) -> FramePath:
    U = FramePath(X.path, OM, check=False)
    sv = np.linalg.svd(U.frames, compute_uv=False)
    k = int(np.argmin(sv.min(axis=1)))
    if sv[k].min() < sv_floor:
        raise ConditioningError(f"frame degenerates at t={U.grid[k]:g} (smallest singular value {sv[k].min():.2e})")
    return U


def _check_u0(OM: FrameBundle, u0):
    u0 = np.asarray(u0, dtype=float)
    if u0.shape != (OM.N,):
        raise DimensionError(f"a frame over R^{OM.nb} with {OM.db} columns has {OM.N} entries")
    OM.check_frame(u0, 1e-8)
    return u0


def frame_point(M: EmbeddedManifold, x, g=None):
    """Flat frame u = (x, g); g defaults to an orthonormal tangent basis."""
    return frame_bundle(M).frame_at(x, g)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def parallel_transport(X: ManifoldRoughPath, u0, cfg: RdeConfig | None = None, check: bool = True, return_log: bool = False):
    """Solve dU = V^nabla_{dX}(U) on O(M) from the frame u0 over x_0."""
    M = X.manifold
    OM = frame_bundle(M)
    u0 = _check_u0(OM, u0)
    if np.linalg.norm(u0[: M.N] - X.values[0]) > 1e-8:
        raise UsageError("initial frame must sit over the starting point of the path")
    if check:
        X.require_membership()
    U, slog = solve_constrained_rde(transport_fields(OM), X.path, u0, cfg, return_log=True)
    out = _frame_path(U, OM)
    return (out, slog) if return_log else out


def unroll(X: ManifoldRoughPath, u0, cfg: RdeConfig | None = None, check: bool = True, return_frames: bool = False):
    """Anti-development: Z = int theta(dU) along the parallel translation U."""
    U = parallel_transport(X, u0, cfg, check=check)
    Z = integrate_one_form(theta_form(U.OM), U.path)
    return (Z, U) if return_frames else Z


def roll(Z: GridRoughPath, u0, M: EmbeddedManifold, cfg: RdeConfig | None = None, return_log: bool = False):
    """Rolling: solve dU = B_{dZ}(U) on O(M); returns (U, pi_* U)."""
    OM = frame_bundle(M)
    u0 = _check_u0(OM, u0)
    Z = as_path(Z)
    if Z.dim != OM.db:
        raise DimensionError(f"rolling onto a {OM.db}-manifold needs a driver in R^{OM.db}")
    U, slog = solve_constrained_rde(horizontal_fields(OM), Z, u0, cfg, return_log=True)
    U = _frame_path(U, OM)
    out = (U, U.base_path())
    return (out, slog) if return_log else out


def develop_full(Z: GridRoughPath, u0, M: EmbeddedManifold, cfg: RdeConfig | None = None) -> FramePath:
    """Solve dU = Y^{O(M)}_{dZ}(U) for a driver in R^d x so(d)."""
    OM = frame_bundle(M)
    u0 = _check_u0(OM, u0)
    Y = parallelism(OM)
    Z = as_path(Z)
    if Z.dim != Y.driver_dim:
        raise DimensionError(f"full development needs a driver in R^{Y.driver_dim}")
    return _frame_path(solve_constrained_rde(Y, Z, u0, cfg), OM)


def antidevelop(U: FramePath) -> GridRoughPath:
    """int (theta, omega)(dU), valued in R^d x so(d)."""
    return integrate_one_form(theta_omega_form(U.OM), U.path)


@dataclass(frozen=True)
class HorizontalityReport:
    """Connection-form parts of int (theta, omega)(dU): all ~= 0 iff U is horizontal."""

    level1: DefectReport
    so_so: DefectReport
    cross_left: DefectReport
    cross_right: DefectReport
    max_level1: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in (self.level1, self.so_so, self.cross_left, self.cross_right))

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "max_level1": self.max_level1,
            "level1": self.level1.to_dict(),
            "so_so": self.so_so.to_dict(),
            "cross_left": self.cross_left.to_dict(),
            "cross_right": self.cross_right.to_dict(),
        }

    def summary(self) -> str:
        return "; ".join(r.summary() for r in (self.level1, self.so_so, self.cross_left, self.cross_right))


def horizontality_defect(U: FramePath, atol: float = 1e-7) -> HorizontalityReport:
    """Connection parts of int (theta, omega)(dU); increments below ``atol`` read as zero."""
    W = antidevelop(U)
    d = U.OM.db

    def part(sel1, sel2=None):
        def f(i, j):
            l1, l2 = W.pair_increments(i, j)
            if sel2 is None:
                return l1[:, sel1]
            return l2[:, sel1, :][:, :, sel2]

        return f

    th, om = slice(0, d), slice(d, W.dim)
    return HorizontalityReport(
        window_report("connection_level1", W, part(om), atol=atol),
        window_report("connection_so_so", W, part(om, om), atol=atol),
        window_report("connection_cross_left", W, part(th, om), atol=atol),
        window_report("connection_cross_right", W, part(om, th), atol=atol),
        float(np.max(np.abs(W.values[:, d:] - W.values[0, d:]))) if W.dim > d else 0.0,
    )


def holonomy_angle(g0, gT, normal=None) -> float:
    """Rotation angle in [0, 2 pi) taking the frame g0 to gT (same tangent plane).

    Positive is counterclockwise seen from ``normal`` (default: the
    orientation of g0 itself).
    """
    g0 = np.asarray(g0, dtype=float)
    gT = np.asarray(gT, dtype=float)
    R = g0.T @ gT
    if R.shape != (2, 2):
        raise DimensionError("holonomy angle needs two-dimensional frames")
    ang = math.atan2(R[1, 0], R[0, 0])
    if normal is not None and np.dot(np.cross(g0[:, 0], g0[:, 1]), normal) < 0:
        ang = -ang
    return ang % (2 * math.pi)


def holonomy(U: FramePath, normal=None, closure_tol: float = 1e-4) -> float:
    x = U.base_values
    gap = np.linalg.norm(x[-1] - x[0])
    if gap > closure_tol:
        raise OffManifoldError(f"holonomy needs a closed loop (endpoint gap {gap:.2e})")
    g = U.frames
    return holonomy_angle(g[0], g[-1], normal)


# ---------------------------------------------------------------------------
# Smooth oracles (classical RK4)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OracleResult:
    times: np.ndarray
    states: np.ndarray
    error_estimate: float
    steps: int


def _rk4(f, t0, y0, t1, n):
    h = (t1 - t0) / n
    y = np.array(y0, dtype=float)
    t = t0
    for _ in range(n):
        k1 = f(t, y)
        k2 = f(t + h / 2, y + h / 2 * k1)
        k3 = f(t + h / 2, y + h / 2 * k2)
        k4 = f(t + h, y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t += h
    return y


def _segmentwise(f_seg, grid, y0, substeps):
    """RK4 with ``substeps`` steps inside every grid interval."""
    out = [np.array(y0, dtype=float)]
    y = out[0]
    for k in range(grid.size - 1):
        y = _rk4(lambda t, s: f_seg(k, t, s), grid[k], y, grid[k + 1], substeps)
        out.append(y)
    return np.array(out)


def _with_estimate(run, substeps, isometry=None, iso_tol=1e-8, max_halvings=6):
    """Run at ``substeps`` and 2*substeps; Richardson estimate of the RK4 error.

    If ``isometry`` is given the step is halved until the frame drift of the
    coarse run is at most ``iso_tol``.
    """
    for _ in range(max_halvings):
        a = run(substeps)
        if isometry is None or isometry(a) <= iso_tol:
            break
        substeps *= 2
    b = run(2 * substeps)
    est = float(np.max(np.abs(a - b))) / 15.0
    return b, est, 2 * substeps


def _iso(states, OM):
    g = OM.split(states)[1]
    return float(np.max(np.abs(np.swapaxes(g, -1, -2) @ g - np.eye(OM.db))))


def _pl_velocity(grid, samples):
    return np.diff(samples, axis=0) / np.diff(grid)[:, None]


def transport_ode_oracle(M: EmbeddedManifold, grid, g0, samples=None, curve=None, substeps: int = 4, adapt: bool = True) -> OracleResult:
    """RK4 for smooth parallel translation.

    With ``curve = (x, xdot)`` callables, integrates g' = -dQ(x') g along the
    given curve on M.  With ``samples`` (a path in R^N sampled on ``grid``),
    integrates the joint system x' = P(x) z', g' = -dQ(P(x) z') g along the
    piecewise-linear interpolation, which is the smooth counterpart of
    transport along the projected driver.
    """
    OM = frame_bundle(M)
    grid = np.asarray(grid, dtype=float)
    N, d = M.N, OM.db
    g0 = np.asarray(g0, dtype=float)
    if curve is not None:
        pos, vel = curve

        def f(k, t, y):
            g = y.reshape(d, N).T
            return _col(-M.dQ(pos(t), vel(t)) @ g, N, d)

        def run(m):
            gs = _segmentwise(f, grid, _col(g0, N, d), m)
            return np.concatenate([pos(grid), gs], axis=1)

    else:
        samples = np.asarray(samples, dtype=float)
        vz = _pl_velocity(grid, samples)

        def f(k, t, y):
            x, g = OM.split(y)
            v = M.P(x) @ vz[k]
            return np.concatenate([v, _col(-M.dQ(x, v) @ g, N, d)])

        def run(m):
            return _segmentwise(f, grid, OM.join(samples[0], g0), m)

    states, est, steps = _with_estimate(run, substeps, (lambda s: _iso(s, OM)) if adapt else None)
    return OracleResult(grid, states, est, steps)


def smooth_rolling_oracle(M: EmbeddedManifold, grid, u0, samples=None, curve=None, substeps: int = 4, adapt: bool = True) -> OracleResult:
    """RK4 for u' = B_{z'}(u) (rolling without slipping or twisting)."""
    OM = frame_bundle(M)
    grid = np.asarray(grid, dtype=float)
    N, d = M.N, OM.db
    if curve is not None:
        vel = curve[1]
        zdot = lambda k, t: vel(t)
    else:
        vz = _pl_velocity(grid, np.asarray(samples, dtype=float))
        zdot = lambda k, t: vz[k]

    def f(k, t, y):
        x, g = OM.split(y)
        v = g @ zdot(k, t)
        return np.concatenate([v, _col(-M.dQ(x, v) @ g, N, d)])

    def run(m):
        return _segmentwise(f, grid, np.asarray(u0, dtype=float), m)

    states, est, steps = _with_estimate(run, substeps, (lambda s: _iso(s, OM)) if adapt else None)
    return OracleResult(grid, states, est, steps)


def smooth_unrolling_oracle(M: EmbeddedManifold, grid, u0, samples=None, curve=None, substeps: int = 4, adapt: bool = True) -> OracleResult:
    """z' = g^T x' along parallel translation (smooth anti-development).

    Returns states [z, x, g] on the grid.
    """
    OM = frame_bundle(M)
    grid = np.asarray(grid, dtype=float)
    N, d = M.N, OM.db
    u0 = np.asarray(u0, dtype=float)
    if curve is not None:
        pos, vel = curve

        def f(k, t, y):
            g = y[d:].reshape(d, N).T
            v = vel(t)
            return np.concatenate([g.T @ v, _col(-M.dQ(pos(t), v) @ g, N, d)])

        def run(m):
            s = _segmentwise(f, grid, np.concatenate([np.zeros(d), u0[N:]]), m)
            return np.concatenate([s[:, :d], pos(grid), s[:, d:]], axis=1)

    else:
        vz = _pl_velocity(grid, np.asarray(samples, dtype=float))

        def f(k, t, y):
            x, g = OM.split(y[d:])
            v = M.P(x) @ vz[k]
            return np.concatenate([g.T @ v, v, _col(-M.dQ(x, v) @ g, N, d)])

        def run(m):
            return _segmentwise(f, grid, np.concatenate([np.zeros(d), u0]), m)

    states, est, steps = _with_estimate(run, substeps, (lambda s: _iso(s[:, d:], OM)) if adapt else None)
    return OracleResult(grid, states, est, steps)


def lie_group_oracle(xi, grid, g0=None) -> OracleResult:
    """Closed-form g_t = exp(-t xi) g0 for a straight-line driver in so(n)."""
    from scipy.linalg import expm

    xi = np.asarray(xi, dtype=float)
    n = xi.shape[0]
    g0 = np.eye(n) if g0 is None else np.asarray(g0, dtype=float)
    grid = np.asarray(grid, dtype=float)
    states = np.array([(expm(-t * xi) @ g0).reshape(-1) for t in grid])
    return OracleResult(grid, states, 0.0, 0)
