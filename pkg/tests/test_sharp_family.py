import math

import numpy as np
import pytest

from hmflow.errors import ResolutionError
from hmflow.map_calculus import RationalMap, degree, sample_rational
from hmflow.sharp_family import (GlueSpec, canonical_coefficients, fit_best_rational, glue, glue_defect,
                                 glue_defect_quadrature, glue_mesh, glue_rational, sigma0, sigma_a,
                                 sweep_header)
from hmflow.sphere_geometry import MobiusDilation, normalize, rotation_about_y


@pytest.mark.parametrize("kw", [dict(k=1, mu=64, a=0.1), dict(k=2, mu=8, a=0.1), dict(k=2, mu=64, a=0.0),
                                dict(k=2, mu=64, a=0.5), dict(k=2, mu=64, a=0.1, d_exp=0.3)])
def test_glue_spec_validation(kw):
    with pytest.raises(ValueError):
        GlueSpec(**kw)


def test_glue_spec_radii():
    s = GlueSpec(2, 256.0, 0.1)
    assert s.r_inner == pytest.approx(256 ** -0.8)
    assert s.r_outer == pytest.approx(256 ** -0.2)
    assert s.r_inner < 1 / math.sqrt(256) < s.r_outer


def test_family_maps():
    assert sigma0(2).num.tolist() == [0, 2]
    with pytest.raises(ValueError):
        sigma_a(0.4)
    R = glue_rational(2, 64.0)
    x = normalize(np.random.default_rng(0).normal(size=(50, 3)))
    assert np.allclose(np.linalg.norm(R.evaluate(x), axis=1), 1.0)


def test_glue_has_degree_two():
    spec = GlueSpec(2, 64.0, 0.2)
    v = glue(spec, glue_mesh(5, spec.mu))
    assert degree(v) == 2


def test_glue_resolution_guard():
    spec = GlueSpec(2, 1e6, 0.2)
    with pytest.raises(ResolutionError):
        glue(spec, glue_mesh(2, 64.0))


def test_glue_defect_matches_quadrature():
    spec = GlueSpec(2, 256.0, 0.2)
    d_mesh = glue_defect(spec, glue_mesh(6, spec.mu))
    d_quad = glue_defect_quadrature(spec)
    assert d_quad > 0
    assert d_mesh == pytest.approx(d_quad, rel=0.1)


def test_canonical_coefficients_represent_map():
    R = RationalMap([0.2, 1], [1, 0.5j], post_rotation=rotation_about_y(0.7))
    c = canonical_coefficients(R)
    R2 = RationalMap(c[:2], c[2:])
    x = normalize(np.random.default_rng(3).normal(size=(30, 3)))
    assert np.allclose(R.evaluate(x), R2.evaluate(x), atol=1e-9)


@pytest.mark.parametrize("distance", ["weighted_by_omega", "h1"])
def test_fit_recovers_degree_one_map(mesh4, distance):
    R = RationalMap.from_mobius(MobiusDilation(normalize([0.3, -0.2, 1.0]), 0.6).mobius)
    R = R.with_rotation(rotation_about_y(0.4))
    v = sample_rational(R, mesh4)
    fit = fit_best_rational(v, 1, distance, rng=np.random.default_rng(0), n_starts=6)
    assert fit.dist_w < 1e-3 and fit.dist_h1 < 1e-3
    x = mesh4.vertices
    assert np.max(np.linalg.norm(fit.best.evaluate(x) - R.evaluate(x), axis=1)) < 1e-3


def test_sweep_header():
    h = sweep_header(2)
    assert h[:3] == ["mu", "a", "defect"]
    assert "dist2_deg1" in h and "dist2_deg2" in h and "ratio_lower" in h
