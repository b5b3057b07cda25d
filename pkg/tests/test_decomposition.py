import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hmflow.decomposition import (Domain, bubble_decompose, choose_annulus_factor, cluster_balls,
                                  harmonic_replace, replaced_patch_energy, select_balls, split_scales,
                                  verify_key_properties)
from hmflow.errors import ClusteringError, ReplacementUnsafeError
from hmflow.harness import RunConfig, perturbed_identity
from hmflow.map_calculus import DiscreteMap, RationalMap, degree, dirichlet_energy, sample_rational
from hmflow.sphere_geometry import NORTH, GeodesicBall, normalize


def test_split_scales_separates_far_scales():
    s = split_scales([0.5, 0.01], 1e-4, 1.0, scale_floor=0.5)
    assert s.captured == (0,) and s.deferred == (1,)
    assert s.resolution_limited
    assert s.s_star < s.S_star < 0.5


def test_split_scales_keeps_close_scales():
    s = split_scales([0.3, 0.5, 0.2], 1e-4, 1.0, scale_floor=0.5)
    assert sorted(s.captured) == [0, 1, 2] and s.deferred == ()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(1e-4, 1.5), min_size=1, max_size=5), st.floats(1e-8, 0.2))
def test_split_scales_partition(radii, delta):
    s = split_scales(radii, delta, 1.0)
    assert sorted(s.captured + s.deferred) == list(range(len(radii)))
    assert min(radii[i] for i in s.captured) >= max([radii[i] for i in s.deferred], default=0)


def test_cluster_balls_merge_and_disjoint():
    c = normalize(np.array([[0, 0, 1], [0.01, 0, 1], [1, 0, 0]]))
    balls, groups = cluster_balls(c, 0.05)
    assert sorted(map(sorted, groups)) == [[0, 1], [2]]
    for i in range(len(balls)):
        for j in range(i + 1, len(balls)):
            d = math.acos(float(np.clip(balls[i].center @ balls[j].center, -1, 1)))
            assert d >= balls[i].radius + balls[j].radius
    for b, g in zip(balls, groups):
        assert np.all(b.contains(c[g]))


def test_cluster_radius_guard():
    c = normalize(np.array([[0, 0, 1], [0.2, 0, 1]]))
    with pytest.raises(ClusteringError):
        cluster_balls(c, 0.12, max_factor=1.5)


def test_annulus_factor_rule():
    lam = np.geomspace(1, 128, 8)
    # lambda = 1 is small but lies before the descent; the local minimum at index 3 wins
    prof = np.array([0.5, 3.0, 1.0, 0.2, 0.4, 0.3, 0.3, 0.3])
    assert choose_annulus_factor(prof, lam, 1.5) == pytest.approx(lam[3])
    assert choose_annulus_factor(np.full(8, 5.0), lam, 1.5) is None


def test_domain_contains():
    d = Domain(GeodesicBall(NORTH, 1.0), (GeodesicBall(NORTH, 0.2),))
    x = normalize(np.array([[0, 0, 1], [0.5, 0, 1], [1, 0, 0]]))
    assert list(d.contains(x)) == [False, True, False]
    assert Domain(None).contains(x).all()
    json.dumps(d.to_dict())


def test_harmonic_replace_constant_boundary(mesh4):
    vals = np.tile([0.0, 0.0, 1.0], (mesh4.n_vertices, 1))
    vals[mesh4.vertices[:, 2] > 0.9] = normalize(np.array([0.3, 0.0, 1.0]))
    u = DiscreteMap(vals, mesh4)
    w = harmonic_replace(u, GeodesicBall(NORTH, 0.6))
    assert np.allclose(w.values, [0, 0, 1], atol=1e-10)


def test_harmonic_replace_guard(mesh4):
    u = DiscreteMap.identity(mesh4)
    with pytest.raises(ReplacementUnsafeError):
        harmonic_replace(u, GeodesicBall(NORTH, 1.0), max_osc=0.5)


def test_replaced_patch_energy_of_harmonic_patch(mesh5):
    # pi(s z) is harmonic, so replacing it in the upper hemisphere changes nothing
    u = sample_rational(RationalMap([0, 0.1], [1]), mesh5)
    e, osc = replaced_patch_energy(u, GeodesicBall(NORTH, math.pi / 2 - 1e-9))
    # the boundary ring lies one cell outside the cap
    assert osc == pytest.approx(2 * math.sin(2 * math.atan(0.1)), rel=0.05)
    exact = 4 * math.pi * 0.01 / 1.01
    assert e == pytest.approx(exact, rel=0.05)


def test_select_balls_single_bubble(mesh5):
    v = sample_rational(RationalMap([0, 8.0], [1]), mesh5)
    balls = select_balls(v, k=1)
    assert len(balls) == 1
    b = balls[0]
    assert b.local_degree == 1
    # z = 0 sits at the north pole, where pi(8z) concentrates
    assert math.acos(min(1.0, float(b.center @ NORTH))) < 0.1
    assert b.radius < 0.3


def test_decompose_single_bubble(mesh4):
    v = sample_rational(RationalMap([0, 3.0], [1]), mesh4)
    dec = bubble_decompose(v, RunConfig(fit_starts=4), defect=1e-6, reference=v)
    assert [c.degree for c in dec.components] == [1]
    rep = verify_key_properties(dec, v)
    assert rep["disjoint"] and rep["covering"] and rep["degree_sum_ok"]
    assert rep["components"][0]["k3_dist2"] < 1e-3
    json.dumps(dec.to_dict())


def test_decompose_trivial_fallback(mesh3):
    v = perturbed_identity(mesh3, 0.5)
    assert dirichlet_energy(v) - 4 * math.pi > 0.25
    dec = bubble_decompose(v, RunConfig(fit_starts=2))
    assert dec.flags.get("trivial_fallback")
    assert len(dec.components) == 1 and dec.components[0].degree == degree(v)
