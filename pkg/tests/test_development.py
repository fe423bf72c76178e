import math

import numpy as np
import pytest
from scipy.linalg import expm

from roughmanifold import drivers
from roughmanifold.calculus import central_difference, relative_error
from roughmanifold.constrained import ManifoldRoughPath, skew_basis
from roughmanifold.development import (
    antidevelop,
    develop_full,
    holonomy,
    holonomy_angle,
    horizontal_fields,
    horizontality_defect,
    integrate_one_form,
    lie_group_oracle,
    lifted_fields,
    omega_form,
    parallel_transport,
    parallelism,
    roll,
    smooth_rolling_oracle,
    smooth_unrolling_oracle,
    theta_form,
    theta_form_pinv,
    transport_fields,
    transport_ode_oracle,
    unroll,
    vertical_fields,
)
from roughmanifold.errors import ConditioningError, DimensionError, OffManifoldError, UsageError
from roughmanifold.manifolds import ManifoldVectorFieldFamily, coordinate_affine, frame_bundle, sphere
from roughmanifold.tensor import rough_distance, signature_lift, weak_geometricity_defect

S2 = sphere(2)
OM = frame_bundle(S2)
NORTH = OM.join(np.array([0.0, 0.0, 1.0]), np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]))


def latitude_frame(theta):
    x0 = np.array([math.sin(theta), 0.0, math.cos(theta)])
    e = np.array([0.0, 1.0, 0.0])
    return OM.join(x0, np.stack([e, np.cross(x0, e)], 1)), x0


FIELDS = {
    "horizontal": horizontal_fields,
    "vertical": vertical_fields,
    "parallelism": parallelism,
    "transport": transport_fields,
    "lifted": lambda OM: lifted_fields(OM, ManifoldVectorFieldFamily.projected_constant(OM.base, np.eye(3)[:, :2])),
}


@pytest.fixture(params=sorted(FIELDS))
def family(request):
    return FIELDS[request.param](OM)


def test_frame_fields_are_tangent(family, rng):
    for _ in range(5):
        u = OM.random_point(rng)
        Ym = family.matrix(u)
        for a in range(Ym.shape[1]):
            res = OM.tangent_condition(u, *OM.split(Ym[:, a]))
            assert max(np.max(np.abs(r)) for r in res) < 1e-8


def test_frame_field_derivatives(family, rng):
    for _ in range(5):
        u = OM.random_point(rng)
        v = rng.normal(size=OM.N)
        fd = central_difference(family.matrix, u, v)
        assert relative_error(family.directional_matrix(u, v), fd) < 1e-6
        ZZ = rng.normal(size=(family.driver_dim,) * 2)
        Ym = family.matrix(u)
        h = 1e-6
        ref = sum(
            ZZ[a, b] * (family.matrix(u + h * Ym[:, a])[:, b] - family.matrix(u - h * Ym[:, a])[:, b]) / (2 * h)
            for a in range(Ym.shape[1])
            for b in range(Ym.shape[1])
        )
        assert relative_error(family.second_order(u, ZZ), ref) < 1e-6


def test_batched_matrix_matches_pointwise(family, rng):
    us = np.stack([OM.random_point(rng) for _ in range(4)])
    batch = family.matrix(us)
    for k in range(4):
        assert np.allclose(batch[k], family.matrix(us[k]))


def test_canonical_form_invariants(rng):
    th, om = theta_form(OM), omega_form(OM)
    B, V = horizontal_fields(OM), vertical_fields(OM)
    for _ in range(5):
        u = OM.random_point(rng)
        assert np.allclose(th.value(u) @ B.matrix(u), np.eye(2), atol=1e-10)
        assert np.allclose(om.value(u) @ B.matrix(u), 0, atol=1e-10)
        assert np.allclose(th.value(u) @ V.matrix(u), 0, atol=1e-10)
        assert np.allclose(om.value(u) @ V.matrix(u), np.eye(1), atol=1e-10)
    assert th.check(rng, 10) < 1e-6 and om.check(rng, 10) < 1e-6
    assert theta_form_pinv(OM).check(rng, 10) < 1e-6


def test_latitude_holonomy():
    u0, x0 = latitude_frame(math.pi / 3)
    X = ManifoldRoughPath(drivers.latitude(256), S2)
    U = parallel_transport(X, u0)
    assert abs(holonomy(U, normal=x0) - math.pi) < 1e-4
    assert U.isometry_defect() < 1e-8 and U.tangency_defect() < 1e-8
    assert np.abs(U.base_values - X.values).max() < 1e-6


def test_transport_on_affine_is_constant():
    M = coordinate_affine(3, [3])
    u0 = frame_bundle(M).join(np.zeros(3), np.eye(3)[:, :2])
    X = ManifoldRoughPath(drivers.brownian(4, 64, dim=3).linear_map(np.diag([1.0, 1.0, 0.0])), M)
    U = parallel_transport(X, u0)
    assert np.allclose(U.frames, np.eye(3)[:, :2], atol=1e-14)


def test_constant_path_transport():
    X = ManifoldRoughPath(signature_lift(np.linspace(0, 1, 9), np.tile([0.0, 0.0, 1.0], (9, 1))), S2)
    U = parallel_transport(X, NORTH)
    assert np.allclose(U.values, NORTH)
    assert np.allclose(unroll(X, NORTH).values, 0)


def test_transport_is_horizontal_and_inverse_to_projection():
    Z = drivers.lissajous(256)
    U, X = roll(Z, NORTH, S2)
    assert horizontality_defect(U).passed
    V = parallel_transport(X, NORTH)
    assert np.abs(V.values - U.values).max() < 1e-7
    assert horizontality_defect(V).passed
    assert np.abs(X.values - U.base_values).max() == 0


def test_vertical_development_is_exponential():
    t = np.linspace(0, 1, 65)
    Zv = signature_lift(t, np.stack([0 * t, 0 * t, 0.7 * t], 1))
    U = develop_full(Zv, NORTH, S2)
    g0 = OM.split(NORTH)[1]
    E = skew_basis(2)[0]
    for k in range(65):
        assert np.allclose(U.frames[k], g0 @ expm(0.7 * t[k] * E), atol=1e-8)
    assert np.allclose(U.base_values, [0, 0, 1], atol=1e-14)
    rep = horizontality_defect(U)
    assert not rep.passed and not rep.level1.passed
    assert rep.max_level1 == pytest.approx(0.7, abs=1e-8)


def test_develop_without_vertical_part_is_roll():
    Z = drivers.lissajous(128)
    Z3 = Z.linear_map(np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]))
    U = develop_full(Z3, NORTH, S2)
    V, _ = roll(Z, NORTH, S2)
    assert np.abs(U.values - V.values).max() < 1e-12


def test_develop_antidevelop_roundtrip():
    pos, vel = drivers.lissajous_curve()
    p3 = lambda s: np.concatenate([pos(s), 0.3 * np.sin(2 * np.pi * np.asarray(s))[..., None]], -1)
    v3 = lambda s: np.concatenate([vel(s), 0.6 * np.pi * np.cos(2 * np.pi * np.asarray(s))[..., None]], -1)
    Z = drivers.smooth_lift(p3, v3, 256)
    W = antidevelop(develop_full(Z, NORTH, S2))
    assert np.abs(W.values - Z.values).max() < 1e-6
    assert np.abs(W.step2 - Z.step2).max() < 1e-6


def test_roll_line_is_great_circle():
    Z = drivers.line([1.0, 0.0], 256, T=2.0)
    U, X = roll(Z, NORTH, S2)
    t = Z.grid
    assert np.abs(X.values - np.stack([np.sin(t), 0 * t, np.cos(t)], 1)).max() < 1e-6


def test_unroll_great_circle_is_line():
    X = ManifoldRoughPath(drivers.great_circle(256, T=2.0, x0=(0, 0, 1.0), v0=(1.0, 0, 0)), S2)
    Z = unroll(X, NORTH)
    assert np.abs(Z.values - np.stack([X.grid, 0 * X.grid], 1)).max() < 1e-6
    assert weak_geometricity_defect(Z).max_defect < 1e-10
    assert np.allclose(Z.values[0], 0)


def test_unroll_latitude_matches_oracle():
    th = math.pi / 3
    u0, _ = latitude_frame(th)
    X = ManifoldRoughPath(drivers.latitude(256, th), S2)
    Z = unroll(X, u0)
    o = smooth_unrolling_oracle(S2, X.grid, u0, curve=drivers.latitude_curve(th, 2 * math.pi))
    assert np.abs(Z.values - o.states[:, :2]).max() < 1e-5
    speed = np.linalg.norm(np.diff(o.states[:, :2], axis=0), axis=1) * 256
    assert np.allclose(speed, math.sin(th) * 2 * math.pi, rtol=1e-5)


def test_unroll_extension_independence():
    X = ManifoldRoughPath(drivers.lissajous(256).linear_map(np.zeros((3, 2))).translate(np.array([0, 0, 1.0])), S2)
    Xs = ManifoldRoughPath(drivers.great_circle(256, T=1.5, x0=(0, 0, 1.0), v0=(0.6, 0.8, 0)), S2)
    for path in (X, Xs):
        Z, U = unroll(path, NORTH, return_frames=True)
        Zp = integrate_one_form(theta_form_pinv(OM), U.path)
        assert np.abs(Z.values - Zp.values).max() < 1e-8


def test_roll_circle_matches_oracle():
    u0, _ = latitude_frame(math.pi / 3)
    Z = drivers.circle(256, radius=0.5)
    U, X = roll(Z, u0, S2)
    o = smooth_rolling_oracle(S2, Z.grid, u0, curve=drivers.planar_circle_curve(0.5, 2 * math.pi))
    assert np.abs(U.values - o.states).max() < 1e-5


def test_roll_zero_driver_is_constant():
    Z = signature_lift(np.linspace(0, 1, 9), np.zeros((9, 2)))
    U, X = roll(Z, NORTH, S2)
    assert np.allclose(X.values, [0, 0, 1])


def test_rolling_roundtrip_converges():
    errs = []
    for n in (64, 128, 256):
        Z = drivers.lissajous(n)
        _, X = roll(Z, NORTH, S2)
        errs.append(rough_distance(unroll(X, NORTH), Z))
    order = np.polyfit(np.log([1 / 64, 1 / 128, 1 / 256]), np.log(errs), 1)[0]
    assert order >= 1


def test_transport_oracle_great_circle_closed_form():
    # along a great circle the velocity-aligned column follows the velocity
    cur = drivers.great_circle_curve()
    g0 = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    o = transport_ode_oracle(S2, np.linspace(0, math.pi / 2, 11), g0, curve=cur, substeps=20)
    g = OM.split(o.states)[1]
    assert np.allclose(g[-1][:, 0], [-1.0, 0.0, 0.0], atol=1e-10)
    assert np.allclose(g[-1][:, 1], [0.0, 0.0, 1.0], atol=1e-10)
    assert o.error_estimate < 1e-10


def test_transport_oracle_rk4_order():
    cur = drivers.latitude_curve(math.pi / 3, 2 * math.pi)
    u0, _ = latitude_frame(math.pi / 3)
    g0 = OM.split(u0)[1]
    grid = np.array([0.0, 1.0])
    ends = [OM.split(transport_ode_oracle(S2, grid, g0, curve=cur, substeps=m, adapt=False).states[-1])[1] for m in (16, 32, 64, 128)]
    diffs = [np.abs(a - b).max() for a, b in zip(ends[:-1], ends[1:])]
    slope = np.polyfit(np.log([1 / 16, 1 / 32, 1 / 64]), np.log(diffs), 1)[0]
    assert slope == pytest.approx(4, abs=0.3)


def test_rolling_oracle_roundtrip():
    cz = drivers.lissajous_curve()
    grid = np.linspace(0, 1, 2001)
    o = smooth_rolling_oracle(S2, grid, NORTH, curve=cz, substeps=1)
    back = smooth_unrolling_oracle(S2, grid, NORTH, samples=o.states[:, :3], substeps=1)
    assert np.abs(back.states[:, :2] - cz[0](grid)).max() < 1e-5


def test_lie_group_oracle():
    xi = skew_basis(3)[0] * 0.5
    o = lie_group_oracle(xi, [0.0, 1.0])
    assert np.allclose(o.states[-1].reshape(3, 3), expm(-0.5 * skew_basis(3)[0]))


def test_holonomy_angle_sign_convention():
    g0 = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    c, s = math.cos(0.3), math.sin(0.3)
    gT = g0 @ np.array([[c, -s], [s, c]])
    assert holonomy_angle(g0, gT, [0, 0, 1]) == pytest.approx(0.3)
    assert holonomy_angle(g0, gT, [0, 0, -1]) == pytest.approx(2 * math.pi - 0.3)
    with pytest.raises(DimensionError):
        holonomy_angle(np.eye(3), np.eye(3))


def test_holonomy_needs_loop():
    X = ManifoldRoughPath(drivers.great_circle(32, T=1.0), S2)
    U = parallel_transport(X, OM.frame_at(X.values[0]))
    with pytest.raises(OffManifoldError):
        holonomy(U)


def test_errors():
    X = ManifoldRoughPath(drivers.great_circle(16), S2)
    with pytest.raises(UsageError):
        parallel_transport(X, NORTH)  # frame over the wrong point
    with pytest.raises(OffManifoldError):
        parallel_transport(X, OM.join(X.values[0], 2 * OM.frame_at(X.values[0])[3:].reshape(2, 3).T))
    with pytest.raises(DimensionError):
        roll(drivers.line([1.0, 0.0, 0.0], 8), NORTH, S2)


def test_conditioning_error():
    from roughmanifold.development import FramePath, _frame_path

    X = ManifoldRoughPath(drivers.great_circle(8), S2)
    U = parallel_transport(X, OM.frame_at(X.values[0]))
    vals = U.values.copy()
    vals[3, 3:] = 0.0
    bad = ManifoldRoughPath(signature_lift(U.grid, vals), OM, check=False)
    with pytest.raises(ConditioningError):
        _frame_path(bad, OM)
    assert isinstance(U, FramePath)


def test_frame_path_serialization():
    U, _ = roll(drivers.lissajous(32), NORTH, S2)
    doc = U.to_dict()
    assert doc["frame_bundle"] == "frame:sphere:d=2"
    assert len(doc["frames"]) == 33 and np.shape(doc["frames"][0]) == (3, 2)
    assert "horizontality" in doc and "frame_path" in doc
