"""Weakly geometric rough paths on embedded manifolds and constrained RDEs."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .calculus import RdeConfig, SmoothMap, pushforward_flat, solution_path, solve_trace
from .errors import DimensionError, MembershipError, OffManifoldError, UsageError
from .io import path_from_dict, path_to_dict
from .manifolds import EmbeddedManifold, ManifoldOneForm, ManifoldVectorFieldFamily, manifold_from_key, special_orthogonal
from .tensor import DefectReport, GridRoughPath, window_report

log = logging.getLogger(__name__)


def trace_distances(M: EmbeddedManifold, values) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    return np.linalg.norm(values - M.closest_points(values), axis=1)


def _check_trace(M: EmbeddedManifold, X: GridRoughPath, tol: float):
    if X.dim != M.N:
        raise DimensionError(f"path lives in R^{X.dim} but {M.key} sits in R^{M.N}")
    dist = trace_distances(M, X.values)
    k = int(np.argmax(dist))
    if dist[k] > tol:
        raise OffManifoldError(f"trace leaves {M.key or 'the manifold'}: distance {dist[k]:.3e} at t={X.grid[k]:g}")
    return float(dist[k])


@dataclass(frozen=True)
class MembershipReport:
    """(I(x)Q) X, its flip (Q(x)I) X and the symmetric-part defect, windowed."""

    right: DefectReport
    flipped: DefectReport
    symmetric: DefectReport
    trace_distance: float

    @property
    def passed(self) -> bool:
        return self.right.passed and self.flipped.passed

    @property
    def consistent(self) -> bool:
        """Both sides of the flip agree on boundedness; the symmetric part passes."""
        return self.right.passed == self.flipped.passed and self.symmetric.passed

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "trace_distance": self.trace_distance,
            "right": self.right.to_dict(),
            "flipped": self.flipped.to_dict(),
            "symmetric": self.symmetric.to_dict(),
        }

    def summary(self) -> str:
        return "; ".join(r.summary() for r in (self.right, self.flipped, self.symmetric))


def membership_defect(X: GridRoughPath, M: EmbeddedManifold, trace_tol: float = 1e-6) -> MembershipReport:
    """Windowed constants of (I(x)Q(x_s)) X_{s,t}; bounded constants mean X lives on M."""
    dist = _check_trace(M, X, trace_tol)
    Qs = M.Q(X.values)

    def right(i, j):
        return X.pair_increments(i, j)[1] @ Qs[i]

    def flipped(i, j):
        return Qs[i] @ X.pair_increments(i, j)[1]

    def symmetric(i, j):
        l2 = X.pair_increments(i, j)[1]
        return 0.5 * (l2 + np.swapaxes(l2, -1, -2)) @ Qs[i]

    return MembershipReport(
        window_report("membership", X, right),
        window_report("membership_flipped", X, flipped),
        window_report("membership_symmetric", X, symmetric),
        dist,
    )


def tangential_projection_report(X: GridRoughPath, M: EmbeddedManifold) -> DefectReport:
    """X_{s,t} - [P(x)P] X_{s,t}, which is ~= 0 for paths on M."""
    Ps = M.P(X.values)

    def defect(i, j):
        l2 = X.pair_increments(i, j)[1]
        P = Ps[i]
        return l2 - P @ l2 @ np.swapaxes(P, -1, -2)

    return window_report("tangential_projection", X, defect)


def qx_constraint_check(X: GridRoughPath, M: EmbeddedManifold) -> tuple[DefectReport, DefectReport]:
    """Normal part of x_{s,t} predicted from X_{s,t} and from the trace alone.

    The first report measures Q x_{s,t} - Q (d_{Pa} P) b at a(x)b = X_{s,t};
    the second measures Q x_{s,t} + 1/2 A_F F''[P x_{s,t}, P x_{s,t}].
    """
    xs = X.values
    P, Q, A = M.projections(xs)
    D = M.dQ_tensor(xs)
    H = M.d2F(xs) if M.k else None

    def full(i, j):
        l1, l2 = X.pair_increments(i, j)
        W = P[i] @ l2 @ np.swapaxes(P[i], -1, -2)
        corr = np.einsum("mij,mikj->mk", W, D[i])
        return np.einsum("mkl,ml->mk", Q[i], l1 + corr)

    def trace_only(i, j):
        l1, _ = X.pair_increments(i, j)
        out = np.einsum("mkl,ml->mk", Q[i], l1)
        if H is not None:
            v = np.einsum("mkl,ml->mk", P[i], l1)
            out = out + 0.5 * np.einsum("mak,mk->ma", A[i], np.einsum("mkij,mi,mj->mk", H[i], v, v))
        return out

    return window_report("qx_constraint", X, full), window_report("qx_trace_only", X, trace_only)


class ManifoldRoughPath:
    """A grid rough path whose trace lies on M, with a lazily computed membership report."""

    def __init__(self, path: GridRoughPath, manifold: EmbeddedManifold, trace_tol: float = 1e-8, check: bool = True):
        self.path = path
        self.manifold = manifold
        self.trace_tol = trace_tol
        self._membership = None
        if check:
            self.trace_distance = _check_trace(manifold, path, trace_tol)

    def __repr__(self):
        return f"ManifoldRoughPath({self.manifold.key}, n={self.path.n_steps})"

    @property
    def grid(self):
        return self.path.grid

    @property
    def values(self):
        return self.path.values

    @property
    def step2(self):
        return self.path.step2

    @property
    def p(self):
        return self.path.p

    @property
    def n_steps(self):
        return self.path.n_steps

    @property
    def dim(self):
        return self.path.dim

    def membership(self) -> MembershipReport:
        if self._membership is None:
            self._membership = membership_defect(self.path, self.manifold, trace_tol=max(self.trace_tol, 1e-6))
        return self._membership

    def require_membership(self):
        rep = self.membership()
        if not rep.passed:
            raise MembershipError(f"path is not a rough path on {self.manifold.key}: {rep.summary()}")
        return rep

    def restrict(self, i0: int, i1: int) -> "ManifoldRoughPath":
        return ManifoldRoughPath(self.path.restrict(i0, i1), self.manifold, self.trace_tol, check=False)

    def to_dict(self) -> dict:
        doc = path_to_dict(self.path)
        doc["manifold"] = self.manifold.key
        doc["membership"] = self.membership().to_dict()
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ManifoldRoughPath":
        if "manifold" not in doc:
            raise UsageError("manifold rough path document needs a 'manifold' key")
        return cls(path_from_dict(doc), manifold_from_key(doc["manifold"]))


def as_path(X) -> GridRoughPath:
    return X.path if isinstance(X, ManifoldRoughPath) else X


# ---------------------------------------------------------------------------
# Integration without extensions
# ---------------------------------------------------------------------------


def canonical_extension(alpha: ManifoldOneForm):
    """The ambient one-form x -> alpha_{pi(x)} P_{pi(x)}.

    It only depends on alpha restricted to TM.  Its derivative along v is
    (nabla_{Pv} alpha) composed with the tangent projection, up to the
    normal term -alpha dQ(Pv) Q which the Levi-Civita derivative discards.
    """
    from .calculus import OneFormE

    M = alpha.manifold

    def _at(x):
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, M.N)
        y = M.closest_points(flat).reshape(x.shape)
        return y

    def value(x):
        y = _at(x)
        return alpha.value(y) @ M.P(y)

    def derivative(x):
        y = _at(x)
        P = M.P(y)
        D = M.dQ_tensor(y)
        a = alpha.value(y)
        Da = alpha.derivative(y)
        # d_l (alpha P) = (d_l alpha) P - alpha D_l, then the chain rule through pi' = P
        g = np.einsum("...wlk,...kj->...wlj", Da, P) - np.einsum("...wk,...lkj->...wlj", a, D)
        return np.einsum("...li,...wlj->...wij", P, g)

    return OneFormE(M.N, alpha.dim_out, value, derivative)


def integrate_manifold_one_form(
    alpha: ManifoldOneForm,
    X: ManifoldRoughPath,
    tol: float = 1e-13,
    max_rounds: int = 20,
    check: bool = True,
    method: str = "intrinsic",
) -> GridRoughPath:
    """Rough integral of a one-form on M along a rough path on M.

    ``intrinsic`` sews the local model alpha(P x) + (nabla alpha)(P X) and
    (alpha(x)alpha)[P(x)P] X, i.e. the integral of the canonical extension
    alpha o pi P o pi, which needs alpha only on TM.  ``extension`` sews the
    ambient representative stored in ``alpha`` instead; on rough paths on M
    both agree up to discretisation.
    """
    from .calculus import integrate_one_form

    M = alpha.manifold
    if X.manifold.N != M.N:
        raise DimensionError("one-form and path live in different ambient spaces")
    if check:
        X.require_membership()
    if method == "intrinsic":
        form = canonical_extension(alpha)
    elif method == "extension":
        form = alpha.ambient()
    else:
        raise UsageError(f"unknown integration method {method!r}")
    return integrate_one_form(form, X.path, tol=tol, max_rounds=max_rounds)


# ---------------------------------------------------------------------------
# Constrained RDEs
# ---------------------------------------------------------------------------


def solve_constrained_rde(
    Y: ManifoldVectorFieldFamily,
    Z: GridRoughPath,
    x0,
    cfg: RdeConfig | None = None,
    reproject: bool = True,
    return_log: bool = False,
):
    """Solve dX = Y_{dZ}(X) on M through the ambient extension P[Y o pi].

    With ``reproject`` the trace is pulled back to M after every step and
    the displacement is recorded in the log.
    """
    cfg = cfg or RdeConfig()
    M = Y.manifold
    x0 = np.asarray(x0, dtype=float)
    M.check_point(x0, 1e-8)
    if Z.dim != Y.driver_dim:
        raise DimensionError(f"vector fields expect a driver in R^{Y.driver_dim}, got R^{Z.dim}")
    if reproject:
        trace, slog = solve_trace(Y, Z, x0, cfg, retract=M.retract)
    else:
        trace, slog = solve_trace(Y.extension(), Z, x0, cfg)
    X, rep = solution_path(trace, slog, Y, Z, cfg)
    slog.trace_report = rep
    out = ManifoldRoughPath(X, M, trace_tol=1e-8 if reproject else np.inf)
    if return_log:
        return out, slog
    return out


def project_to_manifold(Z: GridRoughPath, M: EmbeddedManifold, x0=None, cfg: RdeConfig | None = None, return_log: bool = False):
    """Solve dX = P_X dZ from x0 (default z_0)."""
    Z = as_path(Z)
    x0 = Z.values[0] if x0 is None else x0
    return solve_constrained_rde(ManifoldVectorFieldFamily.canonical(M), Z, x0, cfg, return_log=return_log)


def rde_local_model_reports(X, Y, Z: GridRoughPath) -> tuple[DefectReport, DefectReport]:
    """x_{s,t} vs Y z + (d_{Y_a}Y_b) Z and X_{s,t} vs [Y(x)Y] Z."""
    Xp = as_path(X)
    xs = Xp.values
    Ym = Y.matrix(xs)

    def level1(i, j):
        l1, _ = Xp.pair_increments(i, j)
        z1, z2 = Z.pair_increments(i, j)
        return l1 - np.einsum("mia,ma->mi", Ym[i], z1) - Y.second_order(xs[i], z2)

    def level2(i, j):
        _, l2 = Xp.pair_increments(i, j)
        _, z2 = Z.pair_increments(i, j)
        return l2 - Ym[i] @ z2 @ np.swapaxes(Ym[i], -1, -2)

    return window_report("rde_level1", Xp, level1), window_report("rde_level2", Xp, level2)


def one_form_formulation_reports(X: ManifoldRoughPath, Y, Z: GridRoughPath, alpha: ManifoldOneForm) -> tuple[DefectReport, DefectReport]:
    """Integrals of alpha along a solution against alpha(Y z) + Y_a(alpha(Y_b)) Z and alpha Y Z Y^T alpha^T."""
    I = integrate_manifold_one_form(alpha, X, check=False)
    xs = X.values
    Ym = Y.matrix(xs)
    a = alpha.value(xs)
    Da = alpha.derivative(xs)
    aY = a @ Ym

    def level1(i, j):
        y1, _ = I.pair_increments(i, j)
        z1, z2 = Z.pair_increments(i, j)
        # Y_a(alpha(Y_b)) = alpha'(Y_a, Y_b) + alpha(d_{Y_a} Y_b)
        second = np.einsum("mwij,mia,mjb,mab->mw", Da[i], Ym[i], Ym[i], z2) + np.einsum(
            "mwn,mn->mw", a[i], Y.second_order(xs[i], z2)
        )
        return y1 - np.einsum("mwa,ma->mw", aY[i], z1) - second

    def level2(i, j):
        _, y2 = I.pair_increments(i, j)
        _, z2 = Z.pair_increments(i, j)
        return y2 - aY[i] @ z2 @ np.swapaxes(aY[i], -1, -2)

    return window_report("form_level1", I, level1), window_report("form_level2", I, level2)


def function_formulation_reports(X: ManifoldRoughPath, Y, Z: GridRoughPath, f: SmoothMap) -> tuple[DefectReport, DefectReport]:
    """f(x_t) - f(x_s) vs (Y_Z f)(x_s), and (df(x)df)[P(x)P]X vs Y f (x) Y f Z."""
    M = X.manifold
    xs = X.values
    fx = f.value(xs)
    J = f.jacobian(xs)
    H = f.hessian(xs)
    Ym = Y.matrix(xs)
    JY = J @ Ym
    P = M.P(xs)

    def level1(i, j):
        z1, z2 = Z.pair_increments(i, j)
        pred = np.einsum("mwa,ma->mw", JY[i], z1)
        pred = pred + np.einsum("mwij,mia,mjb,mab->mw", H[i], Ym[i], Ym[i], z2)
        pred = pred + np.einsum("mwn,mn->mw", J[i], Y.second_order(xs[i], z2))
        return fx[j] - fx[i] - pred

    def level2(i, j):
        _, l2 = X.path.pair_increments(i, j)
        _, z2 = Z.pair_increments(i, j)
        JP = J[i] @ P[i]
        return JP @ l2 @ np.swapaxes(JP, -1, -2) - JY[i] @ z2 @ np.swapaxes(JY[i], -1, -2)

    return window_report("function_level1", X.path, level1), window_report("function_level2", X.path, level2)


# ---------------------------------------------------------------------------
# Push-forward
# ---------------------------------------------------------------------------


def pushforward_manifold(
    phi: SmoothMap, X: ManifoldRoughPath, target: EmbeddedManifold, tol: float = 1e-13, check: bool = True
) -> ManifoldRoughPath:
    """phi_* X for a smooth phi: M -> target given by an ambient extension."""
    if phi.dim_in != X.manifold.N or phi.dim_out != target.N:
        raise DimensionError("map does not match the ambient dimensions")
    if check:
        X.require_membership()
    out = pushforward_flat(phi, X.path, tol=tol)
    return ManifoldRoughPath(out, target)


# ---------------------------------------------------------------------------
# Lie groups
# ---------------------------------------------------------------------------


def skew_basis(n: int) -> np.ndarray:
    """E_ij (i < j) with (E_ij)_ij = 1 and (E_ij)_ji = -1, stacked as (n(n-1)/2, n, n)."""
    iu, ju = np.triu_indices(n, 1)
    E = np.zeros((iu.size, n, n))
    E[np.arange(iu.size), iu, ju] = 1.0
    E[np.arange(iu.size), ju, iu] = -1.0
    return E


def skew_from_vector(a, n: int) -> np.ndarray:
    return np.einsum("...k,kij->...ij", np.asarray(a, dtype=float), skew_basis(n))


def vector_from_skew(A) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    iu, ju = np.triu_indices(A.shape[-1], 1)
    return A[..., iu, ju]


def right_invariant_family(G: EmbeddedManifold, n: int) -> ManifoldVectorFieldFamily:
    """Y_a(g) = -xi(a) g on SO(n), matrices flattened row-major."""
    E = skew_basis(n)
    m = E.shape[0]
    # d/dg of -E_b g: -(E_b kron I)
    jac = -np.stack([np.kron(Eb, np.eye(n)) for Eb in E], axis=1)  # [i, b, j]

    def matrix(x):
        g = np.asarray(x).reshape(np.shape(x)[:-1] + (n, n))
        cols = -np.einsum("bij,...jk->...bik", E, g)
        return np.swapaxes(cols.reshape(np.shape(x)[:-1] + (m, n * n)), -1, -2)

    def jacobian(x):
        return np.broadcast_to(jac, np.shape(x)[:-1] + jac.shape)

    def second(x, ZZ):
        g = np.asarray(x).reshape(np.shape(x)[:-1] + (n, n))
        S = np.einsum("...ab,bij,ajk->...ik", ZZ, E, E)
        return (S @ g).reshape(np.shape(x))

    return ManifoldVectorFieldFamily(G, m, matrix, jacobian, second)


def right_invariant_rde(A: GridRoughPath, n: int = 3, g0=None, cfg: RdeConfig | None = None, return_log: bool = False):
    """Solve dG = -(dA) G on SO(n) for a driver in so(n) coordinates."""
    m = n * (n - 1) // 2
    if A.dim != m:
        raise DimensionError(f"so({n}) drivers have {m} coordinates, got {A.dim}")
    G = special_orthogonal(n)
    g0 = np.eye(n).reshape(-1) if g0 is None else np.asarray(g0, dtype=float).reshape(-1)
    return solve_constrained_rde(right_invariant_family(G, n), A, g0, cfg, return_log=return_log)


def orthogonality_drift(X) -> tuple[float, float]:
    """max |g^T g - I| and max |det g - 1| along a trace of flattened matrices."""
    vals = as_path(X).values
    n = int(round(np.sqrt(vals.shape[1])))
    g = vals.reshape(-1, n, n)
    orth = float(np.max(np.abs(np.swapaxes(g, -1, -2) @ g - np.eye(n))))
    det = float(np.max(np.abs(np.linalg.det(g) - 1.0)))
    return orth, det
