import json
import math

import numpy as np
import pytest

from hmflow.harness import perturbed_identity
from hmflow.map_calculus import FOUR_PI, DiscreteMap, RationalMap, dirichlet_energy, sample_rational
from hmflow.sphere_geometry import NORTH, MobiusDilation, WeightedMetric, weighted_metric
from hmflow.weighted_flow import (FlowState, StopCriteria, build_cutoff, cutoff_energy, flow_step,
                                  lojasiewicz_ratio, run_flow, tension, tension_norm, write_snapshots)


def test_tension_is_tangent(mesh4):
    u = perturbed_identity(mesh4, 0.05)
    tau = tension(u)
    assert np.max(np.abs(np.einsum("ij,ij->i", tau, u.values))) < 1e-10


def test_identity_nearly_harmonic(mesh4):
    u = DiscreteMap.identity(mesh4)
    assert tension_norm(u) < 0.05 * tension_norm(perturbed_identity(mesh4, 0.05))


def test_weighted_tension_scales(mesh3):
    u = perturbed_identity(mesh3, 0.05)
    t1 = tension_norm(u)
    t4 = tension_norm(u, WeightedMetric(scale=4.0))
    # tau_g = tau / rho^2 and the norm carries rho^2: ||tau_g||_g = ||tau|| / rho
    assert abs(t4 / t1 - 0.5) < 1e-10


def test_flow_step_decreases_energy(mesh3):
    s = FlowState.start(perturbed_identity(mesh3, 0.05))
    s2, dt, tn = flow_step(s, 1e-3)
    assert s2.energy <= s.energy
    assert s2.travel > 0 and s2.t == pytest.approx(dt)


@pytest.mark.parametrize("scheme,tol", [("explicit", 0.02), ("semi-implicit", 0.15)])
def test_flow_contract(mesh3, scheme, tol):
    u0 = perturbed_identity(mesh3, 0.05)
    res = run_flow(u0, stop=StopCriteria(tension_rel=1e-5), scheme=scheme)
    E = res.history["E"]
    assert res.converged
    assert np.all(np.diff(E) <= 1e-10 * E[:-1])
    assert res.travel_bound_ok
    # energy identity E(t) = E(0) - int ||tau||^2; the semi-implicit
    # dissipation |du|^2/dt is only first order in the (large) step
    drop = E[0] - E[-1]
    diss = res.history["dissipation"][-1]
    assert abs(drop - diss) <= tol * drop


def test_rational_start_stays_put(mesh4):
    u0 = sample_rational(RationalMap.power(2), mesh4)
    res = run_flow(u0, stop=StopCriteria(tension_rel=1e-4, t_max=5.0), scheme="semi-implicit")
    assert abs(dirichlet_energy(res.u) - dirichlet_energy(u0)) < 0.01 * FOUR_PI


def test_stop_on_energy_budget(mesh3):
    u0 = perturbed_identity(mesh3, 0.05)
    E0 = dirichlet_energy(u0)
    res = run_flow(u0, stop=StopCriteria(min_energy=E0 - 1e-4), scheme="semi-implicit")
    assert res.reason == "energy-budget"
    assert dirichlet_energy(res.u) <= E0 - 1e-4


def test_snapshots_ndjson(tmp_path, mesh3):
    p = tmp_path / "snap.ndjson"
    obs = write_snapshots(p)
    try:
        run_flow(perturbed_identity(mesh3, 0.05), stop=StopCriteria(step_max=20), snapshot_every=5,
                 observer=obs)
    finally:
        obs.close()
    recs = [json.loads(line) for line in p.read_text().splitlines()]
    assert len(recs) == 5
    assert {"t", "E", "E_holo", "E_anti", "defect", "tension_l2_g", "travel"} <= set(recs[0])
    assert all(a["E"] >= b["E"] for a, b in zip(recs, recs[1:]))


def test_cutoff(mesh4):
    phi = build_cutoff(NORTH, 0.5, mesh4)
    assert phi.values.max() == 1.0 and phi.values.min() == 0.0
    assert phi.gradient_bound <= 3 / 0.5 * 1.2
    u = DiscreteMap.identity(mesh4)
    assert 0 < cutoff_energy(u, phi) < dirichlet_energy(u)
    with pytest.raises(ValueError):
        build_cutoff(NORTH, 4.0, mesh4)


def test_lojasiewicz_probe(mesh4):
    u = perturbed_identity(mesh4, 0.05)
    met = weighted_metric([MobiusDilation(NORTH, 0.1)])
    p = lojasiewicz_ratio(u, met, [0.1])
    assert p.ratio > 0 and p.defect > 0
    assert p.log_factor == pytest.approx(1 + abs(math.log(0.1)))
    assert p.hypothesis_product == pytest.approx(p.defect * p.log_factor)
