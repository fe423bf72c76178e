import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from roughmanifold.calculus import central_difference, relative_error
from roughmanifold.errors import OffManifoldError, UsageError
from roughmanifold.manifolds import (
    ManifoldOneForm,
    ManifoldVectorFieldFamily,
    coordinate_affine,
    covariant_derivative_form,
    covariant_derivative_vf,
    frame_bundle,
    manifold_from_key,
    product,
    special_orthogonal,
    sphere,
)

MANIFOLDS = {
    "sphere": lambda: sphere(2),
    "sphere_r2_d3": lambda: sphere(3, 2.0),
    "so3": lambda: special_orthogonal(3),
    "affine": lambda: coordinate_affine(3, [3], [0.5]),
    "product": lambda: product(sphere(1), sphere(2)),
    "frame_sphere": lambda: frame_bundle(sphere(2)),
}


@pytest.fixture(params=sorted(MANIFOLDS))
def manifold(request):
    return MANIFOLDS[request.param]()


def test_projection_identities(manifold, rng):
    for _ in range(10):
        x = manifold.random_point(rng)
        P, Q, A = manifold.projections(x)
        assert np.allclose(P + Q, np.eye(manifold.N), atol=1e-12)
        assert np.allclose(P @ P, P, atol=1e-12)
        assert np.allclose(Q, Q.T, atol=1e-12)
        assert np.linalg.matrix_rank(Q, tol=1e-8) == manifold.N - manifold.d
        if manifold.k:
            assert np.allclose(manifold.dF(x) @ P, 0, atol=1e-10)


def test_derivative_hygiene(manifold, rng):
    worst = manifold.check_derivatives(rng, 100)
    assert max(worst.values()) < 1e-6, worst


def test_second_derivative_of_Q(manifold, rng):
    for _ in range(10):
        x = manifold.random_point(rng)
        v, w = rng.normal(size=(2, manifold.N))
        fd = central_difference(lambda y: manifold.dQ(y, w), x, v)
        assert relative_error(manifold.d2Q(x, v, w), fd, floor=1e-6) < 1e-6


def test_dQ_maps_tangent_to_normal(manifold, rng):
    x = manifold.random_point(rng)
    v = manifold.random_tangent(rng, x)
    w = manifold.random_tangent(rng, x)
    P = manifold.P(x)
    # dQ(v) swaps TM and NM: P dQ(v) P = 0
    assert np.allclose(P @ manifold.dQ(x, v) @ P, 0, atol=1e-10)
    assert np.linalg.norm(manifold.P(x) @ (manifold.dQ(x, v) @ w)) < 1e-10


def test_closest_point_and_retract(manifold, rng):
    for _ in range(5):
        x = manifold.random_point(rng)
        n = manifold.Q(x) @ rng.normal(size=manifold.N)
        n *= 0.01 / max(np.linalg.norm(n), 1e-300)
        y = manifold.closest_point(x + n)
        assert manifold.distance(y) < 1e-10
        assert np.linalg.norm(y - x) < 1e-8
        z = manifold.retract(x + 1e-3 * manifold.random_tangent(rng, x))
        assert manifold.distance(z) < 1e-10


def test_check_point_raises():
    S = sphere(2)
    with pytest.raises(OffManifoldError):
        S.check_point(np.array([2.0, 0, 0]))


@given(st.floats(0.1, 3.0), st.floats(0.0, 6.0))
def test_sphere_closest_point_closed_form(r, phi):
    S = sphere(2)
    x = r * np.array([np.cos(phi), np.sin(phi), 0.3])
    assert np.allclose(S.closest_point(x), x / np.linalg.norm(x), atol=1e-12)


def test_so3_polar_closest(rng):
    G = special_orthogonal(3)
    g = G.random_point(rng).reshape(3, 3)
    y = G.closest_point((g + 1e-3 * rng.normal(size=(3, 3))).reshape(-1)).reshape(3, 3)
    assert np.allclose(y.T @ y, np.eye(3), atol=1e-12)
    assert np.linalg.det(y) == pytest.approx(1.0)


def test_frame_bundle_points(rng):
    OM = frame_bundle(sphere(2))
    u = OM.random_point(rng)
    x, g = OM.split(u)
    assert np.allclose(OM.join(x, g), u)
    OM.check_frame(u)
    assert OM.distance(u) < 1e-12
    with pytest.raises(OffManifoldError):
        OM.check_frame(OM.join(x, 2 * g))


def test_frame_bundle_tangent_condition(rng):
    OM = frame_bundle(sphere(2))
    u = OM.random_point(rng)
    xi = OM.random_tangent(rng, u)
    res = OM.tangent_condition(u, *OM.split(xi))
    assert max(np.max(np.abs(r)) for r in res) < 1e-10
    bad = np.zeros(OM.N)
    bad[OM.nb] = 1.0  # pushes the frame off isometry along a non-skew direction
    res = OM.tangent_condition(u, *OM.split(OM.Q(u) @ bad + 0.0))
    assert max(np.max(np.abs(r)) for r in res) > 1e-3


@pytest.mark.parametrize(
    "key",
    ["sphere:d=2", "sphere:d=3,r=2", "so:n=3", "flat:n=3", "affine:n=3,normals=1;2", "frame:sphere:d=2", "product:sphere:d=1|sphere:d=2"],
)
def test_registry_roundtrip(key):
    M = manifold_from_key(key)
    assert manifold_from_key(M.key).key == M.key


@pytest.mark.parametrize("key", ["torus:n=2", "sphere:d=x", "affine:normals=1", "product:sphere:d=2"])
def test_registry_errors(key):
    with pytest.raises(UsageError):
        manifold_from_key(key)


def test_vector_field_jacobians(manifold, rng):
    fams = [ManifoldVectorFieldFamily.canonical(manifold), ManifoldVectorFieldFamily.projected_constant(manifold, rng.normal(size=(manifold.N, 2)))]
    for Y in fams:
        assert Y.tangency_defect(rng, 5) < 1e-10
        for _ in range(5):
            x = manifold.random_point(rng)
            v = rng.normal(size=manifold.N)
            fd = central_difference(Y.matrix, x, v)
            an = np.einsum("ibj,j->ib", Y.jacobian(x), v)
            assert relative_error(an, fd) < 1e-6


def test_extension_second_order_matches_fd(rng):
    M = sphere(2)
    Y = ManifoldVectorFieldFamily.projected_constant(M, rng.normal(size=(3, 2)))
    E = Y.extension()
    x = M.random_point(rng)
    ZZ = rng.normal(size=(2, 2))
    Ym = E.matrix(x)
    h = 1e-6
    ref = sum(ZZ[a, b] * (E.matrix(x + h * Ym[:, a])[:, b] - E.matrix(x - h * Ym[:, a])[:, b]) / (2 * h) for a in range(2) for b in range(2))
    assert np.allclose(Y.second_order(x, ZZ), ref, atol=1e-7)


def test_covariant_derivatives_on_sphere(rng):
    M = sphere(2)
    x = M.random_point(rng)
    v = M.random_tangent(rng, x)
    Y = ManifoldVectorFieldFamily.canonical(M)
    a = M.random_tangent(rng, x)
    # canonical field P z: nabla_v (P z) = P dP(v) z = -P dQ(v) z, zero for tangent z
    assert np.allclose(covariant_derivative_vf(M, Y, v, a, x), 0, atol=1e-10)
    alpha = ManifoldOneForm(M, 1, lambda y: np.asarray(y)[..., None, :], lambda y: np.broadcast_to(np.eye(3)[None], np.shape(y)[:-1] + (1, 3, 3)))
    nab = covariant_derivative_form(M, alpha, v, x)
    assert nab.shape == (1, 3)
    with pytest.raises(UsageError):
        covariant_derivative_vf(M, Y, x, a, x)
