"""Embedded submanifolds of R^N described by local defining functions.

A chart is an open set U with a submersion F: U -> R^k (k = N - d) whose
zero set is M within U.  From F one gets the orthogonal projections

    Q = F'^T (F' F'^T)^{-1} F',   P = I - Q,   A_F = F'^T (F' F'^T)^{-1},

and Gamma = dQ, the Christoffel term of the Levi-Civita connection.  All
of these are smooth extensions off M, which is what the rough integrals
and the constrained solver need.

Several manifolds carry closed forms (spheres, affine subspaces, SO(n));
everything else falls back to the generic formulas.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .calculus import FD_STEP, central_difference, relative_error
from .errors import (
    BasinError,
    ChartNotFoundError,
    DegenerateChartError,
    DimensionError,
    OffManifoldError,
    UsageError,
)


def _fd_tensor(f: Callable, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Stack of central differences of f along every coordinate axis."""
    out = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = 1.0
        out.append(central_difference(f, x, e, h))
    return np.stack(out, axis=-1)


@dataclass(frozen=True)
class DefiningChart:
    """Open set predicate plus F, F' (k, N), F'' (k, N, N) and optionally F'''.

    ``vectorized`` charts accept leading batch axes.
    """

    F: Callable
    dF: Callable
    d2F: Callable
    contains: Callable = lambda x: True
    d3F: Callable | None = None
    name: str = "chart"
    vectorized: bool = False

    def third(self, x):
        if self.d3F is not None:
            return self.d3F(x)
        return _fd_tensor(self.d2F, x)


def _single(x):
    return np.asarray(x, dtype=float).ndim == 1


class EmbeddedManifold:
    """A d-dimensional embedded submanifold of R^N."""

    def __init__(
        self,
        N: int,
        d: int,
        charts: list[DefiningChart],
        key: str = "",
        Q_fn: Callable | None = None,
        dQ_fn: Callable | None = None,
        d2Q_fn: Callable | None = None,
        closest_fn: Callable | None = None,
        retract_fn: Callable | None = None,
        sampler: Callable | None = None,
        tube: float = 0.1,
        batch_closest: bool = False,
    ):
        if not (0 <= d <= N):
            raise UsageError("need 0 <= d <= N")
        self.N = N
        self.d = d
        self.k = N - d
        self.charts = list(charts)
        self.key = key
        self._Q_fn = Q_fn
        self._dQ_fn = dQ_fn
        self._d2Q_fn = d2Q_fn
        self._closest_fn = closest_fn
        self._retract_fn = retract_fn
        self._sampler = sampler
        self.tube = tube
        self.batch_closest = batch_closest

    def __repr__(self):
        return f"EmbeddedManifold({self.key or 'anonymous'}, N={self.N}, d={self.d})"

    # -- charts ------------------------------------------------------------

    def chart_for(self, x) -> DefiningChart:
        x = np.asarray(x, dtype=float)
        probe = x if x.ndim == 1 else x.reshape(-1, self.N)[0]
        for c in self.charts:
            if c.contains(probe):
                return c
        raise ChartNotFoundError(f"no chart of {self.key or 'manifold'} covers the point {np.array2string(probe, precision=4)}")

    def _eval(self, name: str, x):
        x = np.asarray(x, dtype=float)
        c = self.chart_for(x)
        fn = getattr(c, name) if name != "d3F" else c.third
        if x.ndim == 1 or c.vectorized:
            return np.asarray(fn(x), dtype=float)
        flat = x.reshape(-1, self.N)
        out = np.stack([np.asarray(fn(y), dtype=float) for y in flat])
        return out.reshape(x.shape[:-1] + out.shape[1:])

    def F(self, x):
        return self._eval("F", x)

    def dF(self, x):
        return self._eval("dF", x)

    def d2F(self, x):
        return self._eval("d2F", x)

    # -- projections -------------------------------------------------------

    def _generic(self, x):
        J = self.dF(x)
        if self.k == 0:
            z = np.zeros(np.shape(x)[:-1] + (self.N, self.N))
            return J, np.zeros(np.shape(x)[:-1] + (0, 0)), z
        G = J @ np.swapaxes(J, -1, -2)
        sv = np.linalg.svd(J, compute_uv=False)
        if np.min(sv) < 1e-8:
            raise DegenerateChartError(f"F' is not surjective (smallest singular value {np.min(sv):.2e})")
        K = np.linalg.inv(G)
        Q = np.swapaxes(J, -1, -2) @ K @ J
        return J, K, Q

    def projections(self, x):
        """(P, Q, A_F) at an ambient point."""
        x = np.asarray(x, dtype=float)
        J, K, Qg = self._generic(x)
        A = np.swapaxes(J, -1, -2) @ K if self.k else np.zeros(np.shape(x)[:-1] + (self.N, 0))
        Q = self._Q_fn(x) if self._Q_fn is not None else Qg
        return np.eye(self.N) - Q, Q, A

    def Q(self, x):
        if self._Q_fn is not None:
            return self._Q_fn(np.asarray(x, dtype=float))
        return self._generic(x)[2]

    def P(self, x):
        return np.eye(self.N) - self.Q(x)

    def A(self, x):
        return self.projections(x)[2]

    def _dQ_generic(self, x, v):
        J, K, _ = self._generic(x)
        if self.k == 0:
            return np.zeros(np.shape(x)[:-1] + (self.N, self.N))
        H = self.d2F(x)
        Jd = np.einsum("...kij,...i->...kj", H, v)
        Jt = np.swapaxes(J, -1, -2)
        Jdt = np.swapaxes(Jd, -1, -2)
        return Jdt @ K @ J + Jt @ K @ Jd - Jt @ K @ (Jd @ Jt + J @ Jdt) @ K @ J

    def dQ(self, x, v):
        """Directional derivative of the (extended) Q at x along v."""
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        if self._dQ_fn is not None:
            return self._dQ_fn(x, v)
        return self._dQ_generic(x, v)

    def dQ_tangent(self, x, v, tol: float = 1e-8):
        """dQ(v) for a tangent vector v at a manifold point x (checked)."""
        v = np.asarray(v, dtype=float)
        qv = self.Q(x) @ v
        if np.linalg.norm(qv) > tol * max(1.0, np.linalg.norm(v)):
            raise UsageError(f"vector is not tangent (|Qv| = {np.linalg.norm(qv):.2e})")
        return self.dQ(x, v)

    def dQ_tensor(self, x):
        """D with D[..., i, :, :] = dQ(e_i)."""
        x = np.asarray(x, dtype=float)
        E = np.eye(self.N)
        xb = np.broadcast_to(x[..., None, :], x.shape[:-1] + (self.N, self.N))
        if self._dQ_fn is not None:
            return self._dQ_fn(xb, np.broadcast_to(E, xb.shape))
        if x.ndim == 1:
            return np.stack([self._dQ_generic(x, e) for e in E])
        return self._dQ_generic(xb, np.broadcast_to(E, xb.shape))

    def d2Q(self, x, v, w):
        """Derivative along v of x -> dQ_x(w)."""
        x = np.asarray(x, dtype=float)
        if self._d2Q_fn is not None:
            return self._d2Q_fn(x, np.asarray(v, dtype=float), np.asarray(w, dtype=float))
        h = FD_STEP * max(1.0, float(np.linalg.norm(x)))
        v = np.asarray(v, dtype=float)
        return (self.dQ(x + h * v, w) - self.dQ(x - h * v, w)) / (2 * h)

    # -- points ------------------------------------------------------------

    def residual(self, x) -> float:
        if self.k == 0:
            return 0.0
        return float(np.linalg.norm(self.F(x)))

    def closest_point(self, x, max_iter: int = 50, tol: float = 1e-14):
        """Metric closest point on M (Gauss-Newton with normality correction)."""
        x = np.asarray(x, dtype=float)
        if self._closest_fn is not None:
            return self._closest_fn(x)
        return self._gauss_newton(x, max_iter, tol)

    def _gauss_newton(self, x, max_iter=50, tol=1e-14, start=None):
        if self.k == 0:
            return x.copy()
        y = x.copy() if start is None else np.asarray(start, dtype=float).copy()
        scale = max(1.0, float(np.linalg.norm(x)))
        for it in range(max_iter):
            P, Q, A = self.projections(y)
            Fy = self.F(y)
            tang = P @ (x - y)
            if np.linalg.norm(Fy) <= tol * scale and np.linalg.norm(tang) <= 1e3 * tol * scale:
                return y
            y = y - A @ Fy
            y = y + self.P(y) @ (x - y)
        P, Q, A = self.projections(y)
        if np.linalg.norm(self.F(y)) <= 1e-12 * scale and np.linalg.norm(P @ (x - y)) <= 1e-10 * scale:
            return y
        raise BasinError(f"closest-point iteration did not converge in {max_iter} iterations")

    def closest_points(self, xs):
        """closest_point applied row-wise to an (m, N) array."""
        xs = np.asarray(xs, dtype=float)
        if self.batch_closest and self._closest_fn is not None:
            return self._closest_fn(xs)
        return np.stack([self.closest_point(x) for x in xs]) if len(xs) else xs.copy()

    def retract(self, x):
        """Smooth retraction onto M used for per-step re-projection."""
        if self._retract_fn is not None:
            return self._retract_fn(np.asarray(x, dtype=float))
        return self.closest_point(x)

    def distance(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(np.linalg.norm(x - self.closest_point(x)))

    def check_point(self, x, tol: float = 1e-8):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.N,):
            raise DimensionError(f"expected a point of R^{self.N}")
        dist = self.distance(x)
        if dist > tol:
            raise OffManifoldError(f"point is {dist:.3e} away from {self.key or 'the manifold'}")

    def tangent_basis(self, x):
        """Orthonormal basis of T_xM as the columns of an (N, d) matrix."""
        w, V = np.linalg.eigh(self.P(x))
        return V[:, np.argsort(w)[::-1][: self.d]]

    def random_point(self, rng: np.random.Generator):
        if self._sampler is not None:
            return self._sampler(rng)
        raise UsageError("manifold has no sampler")

    def random_tangent(self, rng: np.random.Generator, x):
        return self.P(x) @ rng.normal(size=self.N)

    # -- validation --------------------------------------------------------

    def check_derivatives(self, rng: np.random.Generator, n: int = 100) -> dict:
        """Worst relative error of F', F'', dQ against central differences."""
        worst = {"dF": 0.0, "d2F": 0.0, "dQ": 0.0}
        for _ in range(n):
            x = self.random_point(rng)
            v = rng.normal(size=self.N)
            if self.k:
                worst["dF"] = max(worst["dF"], relative_error(self.dF(x) @ v, central_difference(self.F, x, v)))
                worst["d2F"] = max(
                    worst["d2F"],
                    relative_error(np.einsum("kij,i->kj", self.d2F(x), v), central_difference(self.dF, x, v)),
                )
            worst["dQ"] = max(worst["dQ"], relative_error(self.dQ(x, v), central_difference(self.Q, x, v), floor=1e-6))
        return worst


# ---------------------------------------------------------------------------
# Built-in manifolds
# ---------------------------------------------------------------------------


def sphere(d: int = 2, radius: float = 1.0) -> EmbeddedManifold:
    N = d + 1
    r2 = radius * radius
    I = np.eye(N)

    def F(x):
        return 0.5 * (np.sum(x * x, axis=-1, keepdims=True) - r2)

    def dF(x):
        return x[..., None, :]

    def d2F(x):
        return np.broadcast_to(I, np.shape(x)[:-1] + (1, N, N))

    def d3F(x):
        return np.zeros(np.shape(x)[:-1] + (1, N, N, N))

    def Q(x):
        s = np.sum(x * x, axis=-1)[..., None, None]
        return x[..., :, None] * x[..., None, :] / s

    def dQ(x, v):
        s = np.sum(x * x, axis=-1)[..., None, None]
        xv = np.sum(x * v, axis=-1)[..., None, None]
        o = lambda a, b: a[..., :, None] * b[..., None, :]
        return (o(v, x) + o(x, v)) / s - 2 * xv * o(x, x) / s**2

    def d2Q(x, v, w):
        s = np.sum(x * x, axis=-1)[..., None, None]
        xv = np.sum(x * v, axis=-1)[..., None, None]
        xw = np.sum(x * w, axis=-1)[..., None, None]
        vw = np.sum(v * w, axis=-1)[..., None, None]
        o = lambda a, b: a[..., :, None] * b[..., None, :]
        return (
            (o(w, v) + o(v, w)) / s
            - 2 * xv * (o(w, x) + o(x, w)) / s**2
            - 2 * vw * o(x, x) / s**2
            - 2 * xw * (o(v, x) + o(x, v)) / s**2
            + 8 * xw * xv * o(x, x) / s**3
        )

    def closest(x):
        nrm = np.linalg.norm(x, axis=-1, keepdims=True)
        if np.any(nrm == 0):
            raise BasinError("the origin has no closest point on the sphere")
        return radius * x / nrm

    def sample(rng):
        y = rng.normal(size=N)
        return radius * y / np.linalg.norm(y)

    chart = DefiningChart(
        F, dF, d2F, contains=lambda x: abs(np.linalg.norm(x) - radius) < 0.5 * radius, d3F=d3F, name="sphere", vectorized=True
    )
    key = f"sphere:d={d}" + ("" if radius == 1.0 else f",r={radius:g}")
    return EmbeddedManifold(N, d, [chart], key, Q, dQ, d2Q, closest, None, sample, batch_closest=True)


def affine(L, c=None, key: str | None = None) -> EmbeddedManifold:
    """{x : L x = c} for a full-row-rank L (k, N)."""
    L = np.atleast_2d(np.asarray(L, dtype=float))
    k, N = L.shape
    c = np.zeros(k) if c is None else np.asarray(c, dtype=float)
    if k and np.linalg.matrix_rank(L) < k:
        raise DegenerateChartError("affine constraint matrix must have full row rank")
    Qc = L.T @ np.linalg.solve(L @ L.T, L) if k else np.zeros((N, N))
    Ac = L.T @ np.linalg.inv(L @ L.T) if k else np.zeros((N, 0))

    chart = DefiningChart(
        lambda x: np.asarray(x) @ L.T - c,
        lambda x: np.broadcast_to(L, np.shape(x)[:-1] + (k, N)),
        lambda x: np.zeros(np.shape(x)[:-1] + (k, N, N)),
        d3F=lambda x: np.zeros(np.shape(x)[:-1] + (k, N, N, N)),
        name="affine",
        vectorized=True,
    )

    def Q(x):
        return np.broadcast_to(Qc, np.shape(x)[:-1] + (N, N)).copy()

    def dQ(x, v):
        return np.zeros(np.shape(x)[:-1] + (N, N))

    def d2Q(x, v, w):
        return np.zeros(np.shape(x)[:-1] + (N, N))

    def closest(x):
        return x - (np.asarray(x) @ L.T - c) @ Ac.T

    def sample(rng):
        return closest(rng.normal(size=N))

    key = key or f"affine:n={N},rows={k}"
    return EmbeddedManifold(N, N - k, [chart], key, Q, dQ, d2Q, closest, None, sample, batch_closest=True)


def flat(N: int) -> EmbeddedManifold:
    return affine(np.zeros((0, N)), key=f"flat:n={N}")


def coordinate_affine(n: int, normals, offsets=None) -> EmbeddedManifold:
    """{x in R^n : x_i = c_i for i in normals} (1-based indices)."""
    normals = [int(i) for i in normals]
    L = np.zeros((len(normals), n))
    for r, i in enumerate(normals):
        if not 1 <= i <= n:
            raise UsageError(f"normal index {i} out of range 1..{n}")
        L[r, i - 1] = 1.0
    c = None if offsets is None else np.asarray(offsets, dtype=float)
    key = f"affine:n={n},normals={';'.join(map(str, normals))}"
    return affine(L, c, key=key)


def _sym_index(n: int):
    return np.triu_indices(n)


def special_orthogonal(n: int = 3) -> EmbeddedManifold:
    """SO(n) inside R^{n x n}, matrices flattened row-major."""
    N = n * n
    iu, ju = _sym_index(n)
    k = iu.size
    # d/dg_{rc} (g^T g)_{ab} = delta_{ca} g_{rb} + delta_{cb} g_{ra}
    H = np.zeros((k, N, N))
    for m, (a, b) in enumerate(zip(iu, ju)):
        for r in range(n):
            H[m, r * n + a, r * n + b] += 1.0
            H[m, r * n + b, r * n + a] += 1.0

    def F(x):
        g = np.asarray(x).reshape(np.shape(x)[:-1] + (n, n))
        S = np.swapaxes(g, -1, -2) @ g - np.eye(n)
        return S[..., iu, ju]

    def dF(x):
        return np.einsum("kij,...j->...ki", H, x)

    def d2F(x):
        return np.broadcast_to(H, np.shape(x)[:-1] + (k, N, N))

    def d3F(x):
        return np.zeros(np.shape(x)[:-1] + (k, N, N, N))

    def contains(x):
        g = np.asarray(x).reshape(n, n)
        return np.linalg.det(g) > 0 and np.linalg.norm(g.T @ g - np.eye(n)) < 0.5

    def closest(x):
        g = np.asarray(x).reshape(np.shape(x)[:-1] + (n, n))
        U, _, Vt = np.linalg.svd(g)
        R = U @ Vt
        if np.any(np.linalg.det(R) < 0):
            raise BasinError("matrix is closer to the other component of O(n)")
        return R.reshape(np.shape(x))

    def sample(rng):
        A = rng.normal(size=(n, n))
        Qm, Rm = np.linalg.qr(A)
        Qm = Qm @ np.diag(np.sign(np.diag(Rm)))
        if np.linalg.det(Qm) < 0:
            Qm[:, 0] *= -1
        return Qm.reshape(-1)

    chart = DefiningChart(F, dF, d2F, contains=contains, d3F=d3F, name="so", vectorized=True)
    return EmbeddedManifold(N, n * (n - 1) // 2, [chart], f"so:n={n}", closest_fn=closest, sampler=sample, batch_closest=True)


def product(M1: EmbeddedManifold, M2: EmbeddedManifold) -> EmbeddedManifold:
    N1, N2 = M1.N, M2.N
    N = N1 + N2
    k1, k2 = M1.k, M2.k

    def F(x):
        return np.concatenate([M1.F(x[:N1]) if k1 else np.zeros(0), M2.F(x[N1:]) if k2 else np.zeros(0)])

    def dF(x):
        J = np.zeros((k1 + k2, N))
        if k1:
            J[:k1, :N1] = M1.dF(x[:N1])
        if k2:
            J[k1:, N1:] = M2.dF(x[N1:])
        return J

    def d2F(x):
        H = np.zeros((k1 + k2, N, N))
        if k1:
            H[:k1, :N1, :N1] = M1.d2F(x[:N1])
        if k2:
            H[k1:, N1:, N1:] = M2.d2F(x[N1:])
        return H

    def d3F(x):
        T = np.zeros((k1 + k2, N, N, N))
        if k1:
            T[:k1, :N1, :N1, :N1] = M1.chart_for(x[:N1]).third(x[:N1])
        if k2:
            T[k1:, N1:, N1:, N1:] = M2.chart_for(x[N1:]).third(x[N1:])
        return T

    def contains(x):
        try:
            M1.chart_for(x[:N1])
            M2.chart_for(x[N1:])
        except ChartNotFoundError:
            return False
        return True

    def Q(x):
        if np.ndim(x) > 1:
            return np.stack([Q(y) for y in np.reshape(x, (-1, N))]).reshape(np.shape(x)[:-1] + (N, N))
        out = np.zeros((N, N))
        out[:N1, :N1] = M1.Q(x[:N1])
        out[N1:, N1:] = M2.Q(x[N1:])
        return out

    def dQ(x, v):
        if np.ndim(x) > 1:
            xs = np.reshape(x, (-1, N))
            vs = np.reshape(np.broadcast_to(v, np.shape(x)), (-1, N))
            return np.stack([dQ(a, b) for a, b in zip(xs, vs)]).reshape(np.shape(x)[:-1] + (N, N))
        out = np.zeros((N, N))
        out[:N1, :N1] = M1.dQ(x[:N1], v[:N1])
        out[N1:, N1:] = M2.dQ(x[N1:], v[N1:])
        return out

    def closest(x):
        return np.concatenate([M1.closest_point(x[:N1]), M2.closest_point(x[N1:])])

    def sample(rng):
        return np.concatenate([M1.random_point(rng), M2.random_point(rng)])

    chart = DefiningChart(F, dF, d2F, contains=contains, d3F=d3F, name="product")
    return EmbeddedManifold(N, M1.d + M2.d, [chart], f"product:{M1.key}|{M2.key}", Q, dQ, None, closest, None, sample)


# ---------------------------------------------------------------------------
# Frame bundle
# ---------------------------------------------------------------------------


class FrameBundle(EmbeddedManifold):
    """O(M) inside R^{N + N d}; a point is (x, g) with g stored column-major.

    The defining function is G(x, g) = (F(x), F'(x) g, sym(g^T g - I)).
    The middle block is Q(x) g written in normal coordinates (Q = A_F F'),
    which keeps G' surjective while cutting out the same set and tangent
    space.
    """

    def __init__(self, base: EmbeddedManifold):
        self.base = base
        N, d, k = base.N, base.d, base.k
        self.nb, self.db = N, d
        iu, ju = np.triu_indices(d)
        self._iu, self._ju = iu, ju
        NG = N + N * d
        kG = k + k * d + iu.size
        charts = [self._lift_chart(c) for c in base.charts]
        super().__init__(NG, d + d * (d - 1) // 2, charts, f"frame:{base.key}", retract_fn=self._retract, sampler=self._sample)
        assert kG == self.k

    # flattening helpers
    def split(self, u):
        u = np.asarray(u, dtype=float)
        N, d = self.nb, self.db
        x = u[..., :N]
        g = np.swapaxes(u[..., N:].reshape(u.shape[:-1] + (d, N)), -1, -2)
        return x, g

    def join(self, x, g):
        x = np.asarray(x, dtype=float)
        g = np.asarray(g, dtype=float)
        return np.concatenate([x, np.swapaxes(g, -1, -2).reshape(x.shape[:-1] + (-1,))], axis=-1)

    def _lift_chart(self, c: DefiningChart) -> DefiningChart:
        N, d, k = self.nb, self.db, self.base.k
        iu, ju = self._iu, self._ju
        NG = N + N * d

        def gidx(i, a):
            return N + a * N + i

        def G(u):
            x, g = self.split(u)
            parts = []
            if k:
                parts += [c.F(x), (c.dF(x) @ g).T.reshape(-1)]
            S = g.T @ g - np.eye(d)
            parts.append(S[iu, ju])
            return np.concatenate(parts)

        def dG(u):
            x, g = self.split(u)
            J = np.zeros((self.k, NG))
            if k:
                Jf = c.dF(x)
                Hf = c.d2F(x)
                J[:k, :N] = Jf
                for a in range(d):
                    rows = slice(k + a * k, k + (a + 1) * k)
                    J[rows, :N] = np.einsum("kji,i->kj", Hf, g[:, a])
                    J[rows, N + a * N : N + (a + 1) * N] = Jf
            off = k + k * d
            for m, (a, b) in enumerate(zip(iu, ju)):
                for i in range(N):
                    J[off + m, gidx(i, a)] += g[i, b]
                    J[off + m, gidx(i, b)] += g[i, a]
            return J

        def d2G(u):
            x, g = self.split(u)
            H = np.zeros((self.k, NG, NG))
            if k:
                Hf = c.d2F(x)
                Tf = c.third(x)
                H[:k, :N, :N] = Hf
                for a in range(d):
                    rows = slice(k + a * k, k + (a + 1) * k)
                    H[rows, :N, :N] = np.einsum("kjli,i->kjl", Tf, g[:, a])
                    cols = slice(N + a * N, N + (a + 1) * N)
                    H[rows, :N, cols] = Hf
                    H[rows, cols, :N] = np.swapaxes(Hf, -1, -2)
            off = k + k * d
            for m, (a, b) in enumerate(zip(iu, ju)):
                for i in range(N):
                    H[off + m, gidx(i, a), gidx(i, b)] += 1.0
                    H[off + m, gidx(i, b), gidx(i, a)] += 1.0
            return H

        def contains(u):
            x, g = self.split(u)
            if not c.contains(x):
                return False
            return np.linalg.norm(g.T @ g - np.eye(d)) < 0.5

        return DefiningChart(G, dG, d2G, contains=contains, name=f"frame[{c.name}]")

    def _retract(self, u):
        x, g = self.split(u)
        y = self.base.retract(x)
        h = self.base.P(y) @ g
        U, _, Vt = np.linalg.svd(h, full_matrices=False)
        return self.join(y, U @ Vt)

    def closest_point(self, u, max_iter: int = 50, tol: float = 1e-14):
        u = np.asarray(u, dtype=float)
        return self._gauss_newton(u, max_iter, tol, start=self._retract(u))

    def _sample(self, rng):
        x = self.base.random_point(rng)
        B = self.base.tangent_basis(x)
        Qm, Rm = np.linalg.qr(rng.normal(size=(self.db, self.db)))
        return self.join(x, B @ Qm)

    def frame_at(self, x, g=None):
        """A point of O(M) over x; g defaults to an orthonormal tangent basis."""
        x = np.asarray(x, dtype=float)
        if g is None:
            g = self.base.tangent_basis(x)
        return self.join(x, g)

    def check_frame(self, u, tol: float = 1e-8):
        x, g = self.split(u)
        iso = float(np.max(np.abs(g.T @ g - np.eye(self.db))))
        tan = float(np.max(np.abs(self.base.Q(x) @ g))) if self.db else 0.0
        if iso > tol or tan > tol:
            raise OffManifoldError(f"not an orthonormal tangent frame (isometry {iso:.2e}, normal part {tan:.2e})")
        self.base.check_point(x, tol)

    def tangent_condition(self, u, xi, h):
        """Residuals of the tangent-space description of O(M).

        (xi, h) is tangent at (m, g) iff xi in T_mM, Q h = -dQ(xi) g and
        g^T h is skew.  Returns the three residual norms.
        """
        x, g = self.split(u)
        Q = self.base.Q(x)
        r1 = np.linalg.norm(Q @ xi)
        r2 = np.linalg.norm(Q @ h + self.base.dQ(x, xi) @ g)
        S = g.T @ h
        r3 = np.linalg.norm(S + S.T)
        return float(r1), float(r2), float(r3)


def frame_bundle(M: EmbeddedManifold) -> FrameBundle:
    return FrameBundle(M)


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------


def _params(text: str) -> dict:
    out = {}
    if not text:
        return out
    for part in text.split(","):
        if "=" not in part:
            raise UsageError(f"malformed manifold parameter {part!r}")
        k, v = part.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def manifold_from_key(key: str) -> EmbeddedManifold:
    """Build a manifold from a registry key.

    Recognised keys: ``sphere:d=2[,r=1]``, ``so:n=3``, ``flat:n=3``,
    ``affine:n=4,normals=1;2[,offsets=0;0]``, ``frame:<inner key>`` and
    ``product:<key>|<key>``.
    """
    key = key.strip()
    name, _, rest = key.partition(":")
    try:
        if name == "frame":
            return frame_bundle(manifold_from_key(rest))
        if name == "product":
            a, sep, b = rest.partition("|")
            if not sep:
                raise UsageError("product key needs two factors separated by '|'")
            return product(manifold_from_key(a), manifold_from_key(b))
        prm = _params(rest)
        if name == "sphere":
            return sphere(int(prm.get("d", 2)), float(prm.get("r", 1.0)))
        if name == "so":
            return special_orthogonal(int(prm.get("n", 3)))
        if name == "flat":
            return flat(int(prm["n"]))
        if name == "affine":
            n = int(prm["n"])
            normals = [int(s) for s in prm.get("normals", "").split(";") if s]
            offsets = [float(s) for s in prm["offsets"].split(";")] if "offsets" in prm else None
            return coordinate_affine(n, normals, offsets)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"bad manifold key {key!r}: {exc}") from None
    raise UsageError(f"unknown manifold key {key!r}")


# ---------------------------------------------------------------------------
# Vector fields and one-forms on M
# ---------------------------------------------------------------------------


class ManifoldVectorFieldFamily:
    """Tangent vector fields a -> Y_a on M with an ambient representative.

    ``matrix(x)`` is (N, n) with tangent columns at manifold points and
    ``jacobian(x)[i, b, j]`` the ambient partial derivatives of the
    representative.  ``second_order_fn(x, ZZ)`` may be supplied to compute
    sum_ab ZZ_ab (d_{Y_a} Y_b)(x) directly.
    """

    def __init__(self, manifold: EmbeddedManifold, driver_dim: int, matrix: Callable, jacobian: Callable | None = None, second_order_fn: Callable | None = None):
        self.manifold = manifold
        self.state_dim = manifold.N
        self.driver_dim = driver_dim
        self.matrix = matrix
        self._jacobian = jacobian
        self._second = second_order_fn

    def jacobian(self, x):
        if self._jacobian is not None:
            return self._jacobian(x)
        x = np.asarray(x, dtype=float)
        return _fd_tensor(self.matrix, x)

    def Y(self, x, a):
        return self.matrix(x) @ np.asarray(a, dtype=float)

    def dY(self, x, v, a):
        return np.einsum("ibj,j,b->i", self.jacobian(x), np.asarray(v, dtype=float), np.asarray(a, dtype=float))

    def second_order(self, x, ZZ):
        """sum_ab ZZ_ab (d_{Y_a} Y_b)(x) for the extension P[Y o pi] at x on M."""
        if self._second is not None:
            return self._second(x, ZZ)
        M = self.manifold
        Ym = self.matrix(x)
        D = M.dQ_tensor(x)
        P = M.P(x)
        J = self.jacobian(x)
        return -np.einsum("...ia,...ab,...ikl,...lb->...k", Ym, ZZ, D, Ym) + np.einsum(
            "...kl,...lbq,...qa,...ab->...k", P, J, Ym, ZZ
        )

    def tangency_defect(self, rng: np.random.Generator, n: int = 20) -> float:
        worst = 0.0
        for _ in range(n):
            x = self.manifold.random_point(rng)
            worst = max(worst, float(np.max(np.abs(self.manifold.Q(x) @ self.matrix(x)))))
        return worst

    def extension(self):
        """The ambient family P_F[Y o pi] as a flat vector-field family."""
        from .calculus import VectorFieldFamilyE

        M = self.manifold

        def matrix(x):
            x = np.asarray(x, dtype=float)
            if x.ndim > 1:
                return np.stack([matrix(y) for y in x.reshape(-1, M.N)]).reshape(x.shape[:-1] + (M.N, self.driver_dim))
            return M.P(x) @ self.matrix(M.closest_point(x))

        def jacobian(x):
            x = np.asarray(x, dtype=float)
            if x.ndim > 1:
                return np.stack([jacobian(y) for y in x.reshape(-1, M.N)]).reshape(x.shape[:-1] + (M.N, self.driver_dim, M.N))
            y = M.closest_point(x)
            Ym = self.matrix(y)
            D = M.dQ_tensor(x)
            P = M.P(x)
            Py = M.P(y)
            J = self.jacobian(y)
            return -np.einsum("jil,lb->ibj", D, Ym) + np.einsum("il,lbq,qj->ibj", P, J, Py)

        return VectorFieldFamilyE(M.N, self.driver_dim, matrix, jacobian, lambda x, ZZ: self.second_order(x, ZZ))

    @classmethod
    def canonical(cls, M: EmbeddedManifold) -> "ManifoldVectorFieldFamily":
        """V_z(x) = P_x z, driven by R^N."""

        def matrix(x):
            return M.P(x)

        def jacobian(x):
            return -np.moveaxis(M.dQ_tensor(x), -3, -1)

        def second(x, ZZ):
            P = M.P(x)
            D = M.dQ_tensor(x)
            return -np.einsum("...ja,...ab,...jkb->...k", P, ZZ, D)

        return cls(M, M.N, matrix, jacobian, second)

    @classmethod
    def projected_constant(cls, M: EmbeddedManifold, C) -> "ManifoldVectorFieldFamily":
        """Y_a(x) = P(x) C a for a fixed (N, n) matrix C."""
        C = np.asarray(C, dtype=float)

        def matrix(x):
            return M.P(x) @ C

        def jacobian(x):
            return -np.einsum("...jib,ba->...iaj", M.dQ_tensor(x), C)

        return cls(M, C.shape[1], matrix, jacobian)

    @classmethod
    def zero(cls, M: EmbeddedManifold, n: int) -> "ManifoldVectorFieldFamily":
        return cls(
            M,
            n,
            lambda x: np.zeros(np.shape(x)[:-1] + (M.N, n)),
            lambda x: np.zeros(np.shape(x)[:-1] + (M.N, n, M.N)),
            lambda x, ZZ: np.zeros(np.shape(x)),
        )


class ManifoldOneForm:
    """A one-form on M with values in R^W, given by an ambient representative."""

    def __init__(self, manifold: EmbeddedManifold, dim_out: int, value: Callable, derivative: Callable):
        self.manifold = manifold
        self.dim_out = dim_out
        self.value = value
        self.derivative = derivative

    def restricted(self, x):
        return self.value(x) @ self.manifold.P(x)

    def ambient(self):
        from .calculus import OneFormE

        return OneFormE(self.manifold.N, self.dim_out, self.value, self.derivative)

    @classmethod
    def from_ambient(cls, M: EmbeddedManifold, alpha) -> "ManifoldOneForm":
        return cls(M, alpha.dim_out, alpha.value, alpha.derivative)


def covariant_derivative_vf(M: EmbeddedManifold, Y: ManifoldVectorFieldFamily, v, a, m, tol: float = 1e-8):
    """nabla_v Y_a = P(m) (d_v Y_a)(m) for tangent v."""
    v = np.asarray(v, dtype=float)
    if np.linalg.norm(M.Q(m) @ v) > tol * max(1.0, np.linalg.norm(v)):
        raise UsageError("covariant derivative needs a tangent direction")
    return M.P(m) @ Y.dY(m, v, a)


def covariant_derivative_form(M: EmbeddedManifold, alpha: ManifoldOneForm, v, m, tol: float = 1e-8):
    """nabla_v alpha as an (W, N) matrix acting on T_mM: ((d_v alpha~) - alpha~ dQ(v)) P."""
    v = np.asarray(v, dtype=float)
    if np.linalg.norm(M.Q(m) @ v) > tol * max(1.0, np.linalg.norm(v)):
        raise UsageError("covariant derivative needs a tangent direction")
    Da = np.einsum("wij,i->wj", alpha.derivative(m), v)
    return (Da - alpha.value(m) @ M.dQ(m, v)) @ M.P(m)
