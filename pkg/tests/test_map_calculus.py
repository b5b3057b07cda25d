import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hmflow.errors import DegreeAmbiguousError, InvariantError, MeshMismatchError
from hmflow.map_calculus import (FOUR_PI, DiscreteMap, RationalMap, check_density_bound, defect_value,
                                 degree, dirichlet_energy, energy_report, energy_split, h1_distance,
                                 oscillation, sample_rational, weighted_l2_distance, xi_of)
from conftest import mesh_at
from hmflow.sphere_geometry import NORTH, GeodesicBall, MobiusDilation, integrate, normalize, rotation_about_y


def test_discrete_map_invariants(mesh3):
    with pytest.raises(InvariantError):
        DiscreteMap(2 * mesh3.vertices, mesh3)
    with pytest.raises(MeshMismatchError):
        DiscreteMap(mesh3.vertices[:-1], mesh3)


def test_identity_energy_and_degree(mesh4):
    u = DiscreteMap.identity(mesh4)
    assert degree(u) == 1
    assert abs(dirichlet_energy(u) / FOUR_PI - 1) < 0.01


@pytest.mark.parametrize("k", [1, 2, 3])
def test_power_maps(mesh4, k):
    u = sample_rational(RationalMap.power(k), mesh4)
    assert degree(u) == k
    h, a = energy_split(u)
    assert abs(h + a - dirichlet_energy(u)) < 1e-10 * dirichlet_energy(u)
    assert h > 20 * a


def test_conjugate_has_negative_degree(mesh4):
    R = RationalMap([0, 1], [1], conjugated=True)
    u = sample_rational(R, mesh4)
    assert degree(u) == -1
    h, a = energy_split(u)
    assert a > 20 * h


def test_constant_map(mesh3):
    u = sample_rational(RationalMap.constant(np.array([1.0, 0, 0])), mesh3)
    assert np.allclose(u.values, [1, 0, 0])
    assert dirichlet_energy(u) == 0.0
    assert degree(u) == 0


def test_degree_ambiguous(mesh3):
    # antipodal corners make the geodesic triangles undefined
    vals = mesh3.vertices.copy()
    f = mesh3.faces[0]
    vals[f[1]] = -vals[f[0]]
    with pytest.raises(DegreeAmbiguousError):
        degree(DiscreteMap(vals, mesh3))


def test_shared_root_rejected():
    with pytest.raises(InvariantError):
        RationalMap([-1, 1], [-1, 1])


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 3), st.integers(0, 10_000))
def test_rational_density_integrates_to_4pi_k(k, seed):
    rng = np.random.default_rng(seed)
    roots = 0.5 * np.exp(2j * np.pi * rng.random(k)) * (0.3 + rng.random(k))
    num = np.poly(roots)[::-1]
    R = RationalMap(num, [1.0] + [0] * (k - 1) + [0.7])
    val = 0.5 * integrate(mesh_at(5), R.density)
    assert abs(val / (FOUR_PI * k) - 1) < 0.02


def test_rational_dict_roundtrip():
    R = RationalMap([1 + 2j, 0.5], [0.3j, 1.0], post_rotation=rotation_about_y(0.3))
    R2 = RationalMap.from_dict(R.to_dict())
    x = normalize(np.random.default_rng(0).normal(size=(10, 3)))
    assert np.allclose(R.evaluate(x), R2.evaluate(x))


def test_rotation_acts_on_target():
    R = RationalMap.identity().with_rotation(rotation_about_y(0.4))
    x = normalize(np.random.default_rng(1).normal(size=(5, 3)))
    assert np.allclose(R.evaluate(x), x @ rotation_about_y(0.4).T)


def test_compose_domain_matches_pointwise():
    R = RationalMap([0, 0, 1], [1, 0.2])
    A = MobiusDilation(normalize([0.2, 0.1, 1]), 0.4).mobius
    C = R.compose_domain(A)
    x = normalize(np.random.default_rng(2).normal(size=(20, 3)))
    assert np.allclose(C.evaluate(x), R.evaluate(A.apply(x)), atol=1e-8)


def test_distances(mesh3):
    u = DiscreteMap.identity(mesh3)
    v = sample_rational(RationalMap.identity().with_rotation(rotation_about_y(0.1)), mesh3)
    assert weighted_l2_distance(u, u) == 0.0
    assert h1_distance(u, u) == 0.0
    d = weighted_l2_distance(u, v)
    # |x - Rx| = 2 sin(a/2) sin(angle to axis); integral of sin^2 over S^2 is 8 pi / 3
    exact = math.sqrt(4 * math.sin(0.05) ** 2 * 8 * math.pi / 3)
    assert abs(d / exact - 1) < 0.02
    assert abs(weighted_l2_distance(u, v, 4.0) / d - 2) < 1e-12


def test_oscillation(mesh3):
    u = DiscreteMap.identity(mesh3)
    assert abs(oscillation(u) - 2) < 1e-12
    cap = np.flatnonzero(mesh3.vertices[:, 2] > math.cos(0.3))
    assert oscillation(u, cap) <= 2 * math.sin(0.3) + 1e-12


def test_xi_monotone():
    xs = [xi_of(d) for d in (1e-8, 1e-6, 1e-4, 1e-2, 0.3, 0.9)]
    assert all(a < b for a, b in zip(xs, xs[1:]))
    assert xi_of(0.0) == 0.0


def test_defect_reference_cancellation(mesh4):
    R = RationalMap.power(2)
    ref = sample_rational(R, mesh4)
    assert defect_value(ref, ref) == 0.0
    rep = energy_report(ref, ref)
    assert rep.degree == 2 and rep.defect == 0.0


def test_density_bound_identity():
    # one ball covering all but a small cap: |grad id|^2 = 2 and rho = 1
    out = check_density_bound(RationalMap.identity(), [GeodesicBall(NORTH, 3.0)], k=1)
    assert out["hyp_outside_energy"] and out["hyp_annuli"]
    assert out["ratio"] == pytest.approx(1.0, rel=1e-6)
