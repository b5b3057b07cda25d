"""Acceptance criteria 1-10; each test records one PASS/FAIL line for the terminal summary."""
import math
import time

import numpy as np
import pytest

from conftest import mesh_at
from hmflow.decomposition import replaced_patch_energy
from hmflow.harness import RunConfig, _band, loj_table, perturbed_identity, sweep_fit
from hmflow.map_calculus import (FOUR_PI, DiscreteMap, RationalMap, degree, dirichlet_energy, energy_split,
                                 sample_rational, xi_of)
from hmflow.sharp_family import GlueSpec, glue_defect, glue_mesh, sweep_point
from hmflow.sphere_geometry import NORTH, GeodesicBall, MobiusDilation, integrate, normalize, weighted_metric
from hmflow.weighted_flow import StopCriteria, run_flow

MU_LIST = (64.0, 128.0, 256.0, 512.0)
SWEEP_LEVEL = 6   # criteria 8 and 9: fits and decompositions
GLUE_LEVEL = 7    # criterion 7: defect only
K2_MAX = 50.0


# ---------------------------------------------------------------- shared computations

def _random_rational(rng, max_degree=5, sep=0.1):
    """Coefficients uniform in the unit disc, all zeros and poles pairwise >= sep apart."""
    def disc(n):
        return np.sqrt(rng.random(n)) * np.exp(2j * np.pi * rng.random(n))
    n = int(rng.integers(1, max_degree + 1))
    while True:
        P, Q = disc(n + 1), disc(n + 1)
        r = np.concatenate([np.roots(P[::-1]), np.roots(Q[::-1])])
        d = np.abs(r[:, None] - r[None, :]) + 9 * np.eye(len(r))
        if d.min() >= sep:
            return RationalMap(P, Q), n


@pytest.fixture(scope="module")
def ensemble():
    rng = np.random.default_rng(2024)
    maps = [_random_rational(rng) for _ in range(20)]
    return [(R, n, sample_rational(R, mesh_at(5))) for R, n in maps]


@pytest.fixture(scope="module")
def round_flows():
    mesh = mesh_at(5)
    # the discrete identity is the harmonic limit; its energy removes the mesh error from delta
    e_ref = dirichlet_energy(DiscreteMap.identity(mesh))
    out = {}
    for eps in (0.01, 0.03, 0.05):
        u0 = perturbed_identity(mesh, eps)
        t0 = time.perf_counter()
        res = run_flow(u0, stop=StopCriteria(), scheme="explicit", defect_offset=e_ref)
        out[eps] = (u0, res, time.perf_counter() - t0)
    return out


@pytest.fixture(scope="module")
def sweep():
    cfg = RunConfig()
    rows, extras = [], []
    for mu in MU_LIST:
        row, ex = sweep_point(mu, 2, SWEEP_LEVEL, cfg, np.random.default_rng([cfg.seed, int(mu)]))
        rows.append(row)
        extras.append(ex)
    return rows, extras


# ---------------------------------------------------------------- criteria

def test_criterion_01_energy_oracle(acceptance):
    t0 = time.perf_counter()
    rel, orders = [], []
    for k in range(1, 5):
        err = {lv: dirichlet_energy(sample_rational(RationalMap.power(k), mesh_at(lv))) - FOUR_PI * k
               for lv in (4, 5, 6)}
        rel.append(abs(err[6]) / (FOUR_PI * k))
        orders.append(math.log2(abs(err[4] / err[6])) / 2)
    dt = time.perf_counter() - t0
    ok = max(rel) <= 0.01 and min(orders) >= 1.8 and dt < 30
    acceptance(1, ok, f"max rel err {max(rel):.2e}, min order {min(orders):.3f}, {dt:.1f} s")
    assert ok


def test_criterion_02_degree_exact(acceptance, ensemble):
    got = [(degree(u), n) for _, n, u in ensemble]
    ok = all(g == n for g, n in got)
    acceptance(2, ok, f"{sum(g == n for g, n in got)}/20 exact, degrees {sorted(n for _, n in got)}")
    assert ok


def test_criterion_03_splitting_identities(acceptance, ensemble):
    split_err, deg_err = [], []
    for _, n, u in ensemble:
        E = dirichlet_energy(u)
        h, a = energy_split(u)
        split_err.append(abs(E - h - a) / E)
        deg_err.append(abs((h - a) / FOUR_PI - n))
    ok_split = max(split_err) <= 1e-8
    ok_deg = max(deg_err) <= 0.05
    acceptance(3, ok_split and ok_deg,
               f"split {max(split_err):.1e}; degree identity worst {max(deg_err):.3f} "
               f"({sum(e <= 0.05 for e in deg_err)}/20 within 0.05) at level 5")
    assert ok_split
    assert ok_deg


def test_criterion_04_mobius_normalization(acceptance):
    mesh = mesh_at(6)
    errs = []
    for r in (math.pi / 2, math.pi / 4, math.pi / 16, math.pi / 64):
        M = MobiusDilation(NORTH, r)
        errs.append(abs(integrate(mesh, lambda x: M.conformal_factor(x) ** 2) / FOUR_PI - 1))
    ok = max(errs) <= 5e-3
    acceptance(4, ok, f"max rel err {max(errs):.2e}")
    assert ok


def test_criterion_05_flow_contract(acceptance, round_flows):
    c_fit, worst_id, mono, conv, bound, total = [], 0.0, True, True, True, 0.0
    for eps, (u0, res, dt) in round_flows.items():
        E = np.asarray(res.history["E"])
        # monotone up to round-off in summing the face energies (increases seen ~1e-14 E at the floor)
        mono &= bool(np.all(np.diff(E) <= 1e-12 * E[:-1]))
        d0 = res.defect_initial
        # delta(t) - delta(0) = E(t) - E(0) and the dissipation is sum dt ||tau||^2
        worst_id = max(worst_id, abs(E[-1] - E[0] + res.history["dissipation"][-1]) / d0)
        conv &= res.converged
        bound &= res.displacement <= 1.01 * res.travel
        c_fit.append(res.travel / xi_of(d0))
        total += dt
    band = _band(c_fit)
    ok = mono and conv and bound and worst_id <= 0.02 and band <= 3 and total < 300
    acceptance(5, ok, f"identity err {worst_id:.2e}, C_fit {', '.join(f'{c:.3f}' for c in c_fit)} "
                      f"(band {band:.2f}), {total:.0f} s")
    assert mono
    assert conv and bound
    assert worst_id <= 0.02
    assert band <= 3
    assert total < 300


def test_criterion_06_lojasiewicz(acceptance, round_flows):
    _, res_round, _ = round_flows[0.05]
    rows_round = loj_table(res_round, [math.pi / 2])
    r = 2.0 ** -6
    u0 = perturbed_identity(mesh_at(5), 0.05)
    res_w = run_flow(u0, weighted_metric([MobiusDilation(NORTH, r)]), StopCriteria(t_max=40.0),
                     scheme="semi-implicit")
    rows_w = loj_table(res_w, [r])
    b_round = _band([x["ratio"] for x in rows_round])
    b_w = _band([x["ratio"] for x in rows_w])
    ok = len(rows_round) > 10 and len(rows_w) > 10 and b_round <= 10 and b_w <= 10
    acceptance(6, ok, f"band round {b_round:.2f} ({len(rows_round)} samples), "
                      f"r=2^-6 {b_w:.2f} ({len(rows_w)} samples)")
    assert ok


def test_criterion_07_glue_scaling(acceptance):
    t0 = time.perf_counter()
    rows = []
    for mu in MU_LIST:
        spec = GlueSpec(2, mu, 1.0 / mu)
        rows.append({"mu": mu, "defect": glue_defect(spec, glue_mesh(GLUE_LEVEL, mu))})
    slope, band = sweep_fit(rows)
    dt = time.perf_counter() - t0
    ok = -2.3 <= slope <= -1.9 and band <= 3 and dt < 900
    acceptance(7, ok, f"slope {slope:.3f}, band {band:.3f}, level {GLUE_LEVEL}, {dt:.0f} s")
    assert ok


def test_criterion_08_sharpness_lower_bound(acceptance, sweep):
    rows, _ = sweep
    c = [r["dist2_deg2"] / r["a"] ** 2 for r in rows]
    lower = [r["ratio_lower"] for r in rows]
    b = _band(c)
    ok = min(c) > 0 and b <= 3 and min(lower) > 0 and _band(lower) <= 3
    acceptance(8, ok, f"dist2/a^2 {', '.join(f'{x:.3g}' for x in c)} (band {b:.2f}); "
                      f"ratio_lower min {min(lower):.3g} (band {_band(lower):.2f}), level {SWEEP_LEVEL}")
    assert ok


def test_criterion_09_decomposition(acceptance, sweep):
    _, extras = sweep
    reps = [ex["report"] for ex in extras]
    struct = all(sorted(r["degrees"]) == [1, 1] and r["disjoint"] and r["covering"] for r in reps)
    k3 = [max(c["k3_ratio"] for c in r["components"]) for r in reps]
    k2 = max(c["k2_ratio"] for r in reps for c in r["components"])
    bridge = all(r["bridge_ok"] for r in reps)
    ok = struct and _band(k3) <= 3 and k2 <= K2_MAX and bridge
    acceptance(9, ok, f"degrees {[r['degrees'] for r in reps]}, K3 ratio {', '.join(f'{x:.3g}' for x in k3)} "
                      f"(band {_band(k3):.2f}), K2 max {k2:.3g}, bridge {bridge}")
    assert struct
    assert _band(k3) <= 3
    assert k2 <= K2_MAX
    assert bridge


def _patch_map(mesh, amp, ball):
    """Tilt by amp * (cos 3phi, sin 2phi) on the boundary circle with a rough interior."""
    x = mesh.vertices
    phi = np.arctan2(x[:, 1], x[:, 0])
    s = np.clip(np.arccos(np.clip(x[:, 2], -1, 1)) / ball.radius, 0, 1)
    noise = np.random.default_rng(7).normal(size=(len(x), 2)) * (1 - s[:, None]) * s[:, None]
    tilt = amp * np.column_stack([np.cos(3 * phi) * s + noise[:, 0], np.sin(2 * phi) * s + noise[:, 1]])
    return DiscreteMap(normalize(np.column_stack([tilt, np.ones(len(x))])), mesh)


def test_criterion_10_harmonic_replacement(acceptance):
    mesh = mesh_at(5)
    ball = GeodesicBall(NORTH, 0.5)
    cs = []
    for eta in (0.05, 0.1, 0.2):
        amp = eta / 2
        for _ in range(3):  # match the measured boundary oscillation to eta
            e, osc = replaced_patch_energy(_patch_map(mesh, amp, ball), ball)
            amp *= eta / osc
        u = _patch_map(mesh, amp, ball)
        e, osc = replaced_patch_energy(u, ball)
        cs.append(e / osc ** 2)
    ok = max(cs) <= 20
    acceptance(10, ok, f"C_fit {', '.join(f'{c:.3f}' for c in cs)} for eta 0.05, 0.1, 0.2")
    assert ok
