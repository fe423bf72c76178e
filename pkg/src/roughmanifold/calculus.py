"""Rough integration, push-forwards and rough differential equations in R^N.

Conventions for user-supplied derivatives (all functions are vectorised over
leading batch axes):

* ``OneFormE.value(x)`` has shape (..., W, N); ``derivative(x)[w, i, j]`` is
  the i-th partial derivative of ``value[w, j]``, so that
  alpha'(x)[a (x) b] = sum_ij derivative[w, i, j] a_i b_j (direction first).
* ``VectorFieldFamilyE.matrix(x)`` has shape (..., N, n) with column a equal
  to Y_a(x); ``jacobian(x)[i, b, j]`` is the j-th partial of ``matrix[i, b]``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DimensionError, EndpointMismatchError, ExplosionError, PreconditionError, UsageError
from .tensor import (
    DefectReport,
    GridRoughPath,
    concatenate,
    sew,
    window_report,
)

log = logging.getLogger(__name__)

FD_STEP = 1e-5


def central_difference(f: Callable, x: np.ndarray, v: np.ndarray, h: float = FD_STEP):
    return (np.asarray(f(x + h * v)) - np.asarray(f(x - h * v))) / (2 * h)


def relative_error(a, b, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), floor))


# ---------------------------------------------------------------------------
# Smooth maps, one-forms, vector fields
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SmoothMap:
    """phi: R^N -> R^W with Jacobian (..., W, N) and Hessian (..., W, N, N)."""

    dim_in: int
    dim_out: int
    value: Callable
    jacobian: Callable
    hessian: Callable

    @classmethod
    def linear(cls, L) -> "SmoothMap":
        L = np.atleast_2d(np.asarray(L, dtype=float))
        W, N = L.shape
        return cls(
            N,
            W,
            lambda x: np.asarray(x) @ L.T,
            lambda x: np.broadcast_to(L, np.shape(x)[:-1] + (W, N)),
            lambda x: np.zeros(np.shape(x)[:-1] + (W, N, N)),
        )

    @classmethod
    def identity(cls, N: int) -> "SmoothMap":
        return cls.linear(np.eye(N))

    def compose(self, inner: "SmoothMap") -> "SmoothMap":
        """self o inner, with chain-rule derivatives."""
        if inner.dim_out != self.dim_in:
            raise DimensionError("composition dimension mismatch")

        def jac(x):
            return self.jacobian(inner.value(x)) @ inner.jacobian(x)

        def hess(x):
            y = inner.value(x)
            Ji = inner.jacobian(x)
            Ho = self.hessian(y)
            Hi = inner.hessian(x)
            Jo = self.jacobian(y)
            return np.einsum("...wab,...ai,...bj->...wij", Ho, Ji, Ji) + np.einsum("...wa,...aij->...wij", Jo, Hi)

        return SmoothMap(inner.dim_in, self.dim_out, lambda x: self.value(inner.value(x)), jac, hess)

    def check(self, rng: np.random.Generator, n: int = 100, scale: float = 1.0, points=None) -> float:
        """Worst relative FD error of the Jacobian and Hessian."""
        worst = 0.0
        pts = points if points is not None else rng.normal(size=(n, self.dim_in)) * scale
        for x in pts:
            v = rng.normal(size=self.dim_in)
            worst = max(worst, relative_error(self.jacobian(x) @ v, central_difference(self.value, x, v)))
            fd = central_difference(self.jacobian, x, v)
            worst = max(worst, relative_error(np.einsum("wij,i->wj", self.hessian(x), v), fd))
        return worst


@dataclass(frozen=True)
class OneFormE:
    """A one-form on R^N with values in R^W."""

    dim_in: int
    dim_out: int
    value: Callable
    derivative: Callable

    @classmethod
    def constant(cls, L) -> "OneFormE":
        L = np.atleast_2d(np.asarray(L, dtype=float))
        W, N = L.shape
        return cls(
            N,
            W,
            lambda x: np.broadcast_to(L, np.shape(x)[:-1] + (W, N)),
            lambda x: np.zeros(np.shape(x)[:-1] + (W, N, N)),
        )

    @classmethod
    def exact(cls, phi: SmoothMap) -> "OneFormE":
        """d(phi)."""
        return cls(phi.dim_in, phi.dim_out, phi.jacobian, phi.hessian)

    def pullback(self, phi: SmoothMap) -> "OneFormE":
        """(phi^* alpha)(x) = alpha(phi(x)) phi'(x)."""
        if phi.dim_out != self.dim_in:
            raise DimensionError("pullback dimension mismatch")

        def value(x):
            return self.value(phi.value(x)) @ phi.jacobian(x)

        def deriv(x):
            y = phi.value(x)
            J = phi.jacobian(x)
            Da = self.derivative(y)
            a = self.value(y)
            return np.einsum("...wkl,...ki,...lj->...wij", Da, J, J) + np.einsum("...wl,...lij->...wij", a, phi.hessian(x))

        return OneFormE(phi.dim_in, self.dim_out, value, deriv)

    def check(self, rng: np.random.Generator, n: int = 100, scale: float = 1.0, points=None) -> float:
        worst = 0.0
        pts = points if points is not None else rng.normal(size=(n, self.dim_in)) * scale
        for x in pts:
            v = rng.normal(size=self.dim_in)
            fd = central_difference(self.value, x, v)
            worst = max(worst, relative_error(np.einsum("wij,i->wj", self.derivative(x), v), fd))
        return worst


@dataclass(frozen=True)
class VectorFieldFamilyE:
    """a -> Y_a, a linear family of vector fields on R^N driven by R^n."""

    state_dim: int
    driver_dim: int
    matrix: Callable
    jacobian: Callable
    second_order_fn: Callable | None = None

    def Y(self, x, a):
        return self.matrix(x) @ np.asarray(a, dtype=float)

    def dY(self, x, v, a):
        """(d_v Y_a)(x)."""
        return np.einsum("...ibj,...j,b->...i", self.jacobian(x), np.asarray(v, dtype=float), np.asarray(a, dtype=float))

    def second_order(self, x, ZZ):
        """sum_ab ZZ[a, b] (d_{Y_a} Y_b)(x)."""
        if self.second_order_fn is not None:
            return self.second_order_fn(x, ZZ)
        J = self.jacobian(x)
        M = self.matrix(x)
        return np.einsum("...ibj,...ja,...ab->...i", J, M, ZZ)

    @classmethod
    def zero(cls, N: int, n: int) -> "VectorFieldFamilyE":
        return cls(N, n, lambda x: np.zeros(np.shape(x)[:-1] + (N, n)), lambda x: np.zeros(np.shape(x)[:-1] + (N, n, N)))

    @classmethod
    def translation(cls, N: int) -> "VectorFieldFamilyE":
        I = np.eye(N)
        return cls(
            N,
            N,
            lambda x: np.broadcast_to(I, np.shape(x)[:-1] + (N, N)),
            lambda x: np.zeros(np.shape(x)[:-1] + (N, N, N)),
            lambda x, ZZ: np.zeros(np.shape(x)),
        )

    @classmethod
    def linear(cls, mats) -> "VectorFieldFamilyE":
        """Y_a(x) = A_a x for a stack of matrices A (n, N, N)."""
        mats = np.asarray(mats, dtype=float)
        n, N, _ = mats.shape

        def matrix(x):
            return np.einsum("aij,...j->...ia", mats, x)

        jac = np.transpose(mats, (1, 0, 2))  # [i, a, j]

        def jacobian(x):
            return np.broadcast_to(jac, np.shape(x)[:-1] + (N, n, N))

        return cls(N, n, matrix, jacobian)

    def check(self, rng: np.random.Generator, n: int = 100, scale: float = 1.0, points=None) -> float:
        worst = 0.0
        pts = points if points is not None else rng.normal(size=(n, self.state_dim)) * scale
        for x in pts:
            v = rng.normal(size=self.state_dim)
            fd = central_difference(self.matrix, x, v)
            worst = max(worst, relative_error(np.einsum("ibj,j->ib", self.jacobian(x), v), fd))
        return worst

    def bound_estimate(self, rng: np.random.Generator, center, radius: float = 1.0, n: int = 200) -> float:
        """Measured sup of |Y| and |Y'| over random points of a ball."""
        center = np.asarray(center, dtype=float)
        pts = center + radius * rng.uniform(-1, 1, size=(n, self.state_dim))
        a = np.max(np.linalg.norm(self.matrix(pts).reshape(n, -1), axis=1))
        b = np.max(np.linalg.norm(self.jacobian(pts).reshape(n, -1), axis=1))
        return float(max(a, b))


# ---------------------------------------------------------------------------
# Integration and push-forward
# ---------------------------------------------------------------------------


def _check_dims(Z: GridRoughPath, N: int, what: str):
    if Z.dim != N:
        raise DimensionError(f"{what} expects a driver of dimension {N}, got {Z.dim}")


def integrate_one_form(alpha: OneFormE, Z: GridRoughPath, x0=None, tol: float = 1e-13, max_rounds: int = 20, return_log: bool = False):
    """Rough integral of alpha along Z, sewn from the second-order local model.

    Candidate: (alpha(z_s) z_{s,t} + alpha'(z_s) Z_{s,t}, (alpha(z_s)(x)alpha(z_s)) Z_{s,t}).
    """
    _check_dims(Z, alpha.dim_in, "integrate_one_form")

    def candidate(k, lam0, lam1):
        zs = Z.sub_values(k, lam0)
        l1, l2 = Z.sub_increments(k, lam0, lam1)
        a = alpha.value(zs)
        Da = alpha.derivative(zs)
        y1 = np.einsum("kwn,kn->kw", a, l1) + np.einsum("kwij,kij->kw", Da, l2)
        y2 = np.einsum("kwi,kij,kvj->kwv", a, l2, a)
        return y1, y2

    return sew(candidate, Z.grid, x0=x0, p=Z.p, tol=tol, max_rounds=max_rounds, return_log=return_log)


def pushforward_flat(phi: SmoothMap, Z: GridRoughPath, tol: float = 1e-13, max_rounds: int = 20) -> GridRoughPath:
    """phi_*(Z): level 1 is phi(z_t) exactly, level 2 is sewn from (phi'(x)phi')Z."""
    _check_dims(Z, phi.dim_in, "pushforward_flat")

    def candidate(k, lam0, lam1):
        zs = Z.sub_values(k, lam0)
        zt = Z.sub_values(k, lam1)
        _, l2 = Z.sub_increments(k, lam0, lam1)
        J = phi.jacobian(zs)
        return phi.value(zt) - phi.value(zs), np.einsum("kwi,kij,kvj->kwv", J, l2, J)

    out = sew(candidate, Z.grid, x0=phi.value(Z.values[0]), p=Z.p, tol=tol, max_rounds=max_rounds)
    # level 1 is exact by construction; avoid accumulating the sum
    return GridRoughPath(Z.grid, phi.value(Z.values), out.step2, Z.p)


# ---------------------------------------------------------------------------
# RDE solver
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RdeConfig:
    """Solver settings.

    h : target sub-step length (None: one sub-step per driver interval)
    rounds : maximal number of dyadic refinements after the first run
    tol : Cauchy tolerance on the trace at driver grid times
    extrapolate : combine the last two runs by Richardson extrapolation
    R_max : explosion radius
    step_cap : a step may not exceed step_cap * omega^{1/p} * (1 + |x|)
    check_trace : verify the local RDE relation before augmenting
    """

    h: float | None = None
    rounds: int = 2
    tol: float = 1e-8
    extrapolate: bool = True
    R_max: float = 1e6
    step_cap: float = 10.0
    sew_tol: float = 1e-13
    sew_rounds: int = 20
    check_trace: bool = True

    def __post_init__(self):
        if self.h is not None and not self.h > 0:
            raise UsageError("RdeConfig.h must be positive")
        if not (self.tol > 0 and self.sew_tol > 0 and self.R_max > 0 and self.step_cap > 0):
            raise UsageError("RdeConfig tolerances must be positive")
        if self.rounds < 0:
            raise UsageError("RdeConfig.rounds must be non-negative")


@dataclass
class SolverLog:
    rounds: list = field(default_factory=list)
    converged: bool = False
    max_displacement: float = 0.0
    displacements: np.ndarray | None = None
    trace_report: DefectReport | None = None
    level2: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {
            "rounds": self.rounds,
            "converged": self.converged,
            "max_displacement": float(self.max_displacement),
            "trace_report": None if self.trace_report is None else self.trace_report.to_dict(),
        }


def _substeps(Z: GridRoughPath, h: float | None) -> int:
    if h is None:
        return 1
    dt = float(np.max(np.diff(Z.grid)))
    m = max(1, math.ceil(dt / h - 1e-9))
    return 1 << (m - 1).bit_length()


def _davie_run(Y, Z: GridRoughPath, x0, m: int, cfg: RdeConfig, retract=None):
    """One pass of the second-order Euler scheme with m sub-steps per interval.

    Returns the trace at driver grid times, the level 2 of each driver
    interval obtained by folding [Y(x)(x)Y(x)] Z_sub along the computed
    sub-step trace, and the per-step retraction displacements (None
    without retraction).
    """
    n = Z.n_steps
    d = Z.deltas
    A = Z.step2 - 0.5 * d[:, :, None] * d[:, None, :]
    dz = d / m
    ZZ = A / m + 0.5 * dz[:, :, None] * dz[:, None, :]
    dt = np.diff(Z.grid) / m
    omega = Z.control
    caps = cfg.step_cap * np.maximum(omega(np.zeros_like(dt), dt), 0.0) ** (1.0 / Z.p)
    x = np.array(x0, dtype=float)
    out = np.empty((n + 1, x.size))
    out[0] = x
    lev2 = np.zeros((n, x.size, x.size))
    disp = np.zeros(n * m) if retract is not None else None
    matrix = Y.matrix
    second = Y.second_order
    R_max = cfg.R_max
    for k in range(n):
        dzk = dz[k]
        ZZk = ZZ[k]
        cap = caps[k]
        xk = x
        acc = lev2[k]
        for j in range(m):
            Ym = matrix(x)
            step = Ym @ dzk + second(x, ZZk)
            nx = math.sqrt(float(x @ x))
            ns = math.sqrt(float(step @ step))
            if not math.isfinite(ns) or ns > cap * (1.0 + nx) + 1e-300 and ns > 1e-14 * (1.0 + nx):
                t = Z.grid[k] + j * dt[k]
                raise ExplosionError(f"step norm {ns:.3e} exceeds growth cap {cap * (1 + nx):.3e} at t={t:g}", t)
            xn = x + step
            if retract is not None:
                y = retract(xn)
                disp[k * m + j] = math.sqrt(float((y - xn) @ (y - xn)))
                xn = y
            # Chen product of the sub-step local models along the computed trace
            acc += Ym @ ZZk @ Ym.T + np.outer(x - xk, xn - x)
            x = xn
            if x @ x > R_max * R_max:
                t = Z.grid[k] + (j + 1) * dt[k]
                raise ExplosionError(f"|x| = {math.sqrt(float(x @ x)):.3e} exceeds R_max at t={t:g}", t)
        out[k + 1] = x
    return out, lev2, disp


def solve_trace(Y, Z: GridRoughPath, x0, cfg: RdeConfig | None = None, retract=None):
    """Trace of the RDE solution at the driver grid times, plus the solver log."""
    cfg = cfg or RdeConfig()
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (Y.state_dim,):
        raise DimensionError(f"x0 must have shape ({Y.state_dim},)")
    _check_dims(Z, Y.driver_dim, "solve_rde_flat")
    slog = SolverLog()
    m = _substeps(Z, cfg.h)
    prev = prev2 = None
    trace = None
    for r in range(cfg.rounds + 1):
        cur, cur2, disp = _davie_run(Y, Z, x0, m, cfg, retract)
        entry = {"round": r, "substeps": m, "mesh": float(np.max(np.diff(Z.grid)) / m)}
        if disp is not None and disp.size:
            entry["max_displacement"] = float(disp.max())
            slog.max_displacement = float(disp.max())
            slog.displacements = disp
        if prev is None:
            trace = cur
            slog.level2 = cur2
            entry["cauchy"] = None
        else:
            dist = float(np.max(np.linalg.norm(cur - prev, axis=1)))
            entry["cauchy"] = dist
            trace = cur
            slog.level2 = cur2
            if cfg.extrapolate:
                # second-order scheme: error ~ c h^2
                trace = cur + (cur - prev) / 3.0
                slog.level2 = cur2 + (cur2 - prev2) / 3.0
                if retract is not None:
                    trace = np.array([retract(y) for y in trace])
            if dist / 3.0 <= cfg.tol or dist <= cfg.tol:
                slog.converged = True
        slog.rounds.append(entry)
        log.debug("rde round %s", entry)
        if slog.converged:
            break
        prev, prev2 = cur, cur2
        m *= 2
    if cfg.rounds == 0:
        slog.converged = True
    return trace, slog


def solve_rde_flat(Y: VectorFieldFamilyE, Z: GridRoughPath, x0, cfg: RdeConfig | None = None, retract=None, return_log: bool = False):
    """Solve dx = Y(x) dZ and return the solution as a rough path.

    The trace comes from the second-order Euler scheme under global dyadic
    refinement.  Its level 2 is the almost rough path [Y(x_s)(x)Y(x_s)] Z_{s,t}
    sewn on the solver's own sub-step partition (Chen products along the
    computed trace), extrapolated in the sub-step length like the trace.
    """
    cfg = cfg or RdeConfig()
    trace, slog = solve_trace(Y, Z, x0, cfg, retract)
    X, rep = solution_path(trace, slog, Y, Z, cfg)
    slog.trace_report = rep
    if return_log:
        return X, slog
    return X


def solution_path(trace, slog: SolverLog, Y, Z: GridRoughPath, cfg: RdeConfig):
    """Rough path of a solver run: trace plus the folded level 2.

    The antisymmetric part comes from the extrapolated fold; the symmetric
    part is set to 1/2 dx(x)dx so the result is weakly geometric exactly.
    """
    rep = None
    if cfg.check_trace and Z.n_steps >= 2:
        rep = trace_relation_report(trace, Y, Z)
        if not rep.passed:
            raise PreconditionError(f"solver trace fails the local RDE relation ({rep.summary()})")
    d = np.diff(trace, axis=0)
    L = slog.level2
    step2 = 0.5 * (L - np.swapaxes(L, -1, -2)) + 0.5 * d[:, :, None] * d[:, None, :]
    return GridRoughPath(Z.grid, trace, step2, Z.p), rep


def trace_relation_report(x, Y, Z: GridRoughPath) -> DefectReport:
    """Windowed defect of x_{s,t} - Y(x_s) z_{s,t} - (Y'Y)(x_s) Z_{s,t}."""
    x = np.asarray(x, dtype=float)

    def defect(i, j):
        z1, z2 = Z.pair_increments(i, j)
        xs = x[i]
        return x[j] - xs - np.einsum("kia,ka->ki", Y.matrix(xs), z1) - Y.second_order(xs, z2)

    base = GridRoughPath(Z.grid, x, np.zeros((Z.n_steps, x.shape[1], x.shape[1])), Z.p, Z.control)
    return window_report("rde_local_model", base, defect)


def _augment(x, Y, Z: GridRoughPath, tol: float, rounds: int, check: bool):
    x = np.asarray(x, dtype=float)
    rep = None
    if check and Z.n_steps >= 2:
        rep = trace_relation_report(x, Y, Z)
        if not rep.passed:
            raise PreconditionError(
                f"trace does not satisfy the local RDE relation ({rep.summary()}); "
                f"worst pair {rep.worst}"
            )
    d = np.diff(x, axis=0)

    def candidate(k, lam0, lam1):
        xs = x[k] + lam0[:, None] * d[k]
        _, l2 = Z.sub_increments(k, lam0, lam1)
        M = Y.matrix(xs)
        return (lam1 - lam0)[:, None] * d[k], np.einsum("kia,kab,kjb->kij", M, l2, M)

    X = sew(candidate, Z.grid, x0=x[0], p=Z.p, tol=tol, max_rounds=rounds)
    # keep the trace itself rather than its cumulative sum
    return GridRoughPath(Z.grid, x, X.step2, Z.p), rep


def augment_trace(x, Y: VectorFieldFamilyE, Z: GridRoughPath, tol: float = 1e-13, max_rounds: int = 20, check: bool = True) -> GridRoughPath:
    """Complete a solution trace to a rough path (sewing of [Y(x)(x)Y(x)]Z)."""
    x = np.asarray(x, dtype=float)
    if x.shape != (Z.n_steps + 1, Y.state_dim):
        raise DimensionError("trace must have one sample per driver grid point")
    return _augment(x, Y, Z, tol, max_rounds, check)[0]


def concatenate_rde(Xa: GridRoughPath, Xb: GridRoughPath, Y=None, Z: GridRoughPath | None = None, atol: float = 1e-10) -> GridRoughPath:
    """Join solutions on [0, tau] and [tau, T] of the same RDE.

    A degenerate first piece (a single grid point) is the identity.
    """
    if Xa.n_steps == 0:
        return Xb
    if Xb.n_steps == 0:
        return Xa
    if Z is not None and not (np.isclose(Xa.grid[0], Z.grid[0]) and np.isclose(Xb.grid[-1], Z.grid[-1])):
        raise EndpointMismatchError("pieces do not span the driver interval")
    return concatenate([Xa, Xb], atol=atol)
