"""Weighted harmonic map heat flow, cut-off energies and the Lojasiewicz probe."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import DegreeAmbiguousError, ResolutionError, StalledFlowError
from .map_calculus import (DiscreteMap, degree, dirichlet_energy, energy_split, face_energies,
                           weighted_l2_distance)
from .sphere_geometry import ROUND, GeodesicBall, WeightedMetric, normalize

FOUR_PI = 4 * np.pi


def _rho2(metric: WeightedMetric, mesh):
    return metric.vertex_rho2(mesh)


def _laplace(u: DiscreteMap):
    """Lu with L the cotangent stiffness matrix; Delta u = -M^{-1} L u."""
    return u.mesh.laplacian @ u.values


def _tension_from(Lu, values, mass, rho2):
    lap = -Lu / mass[:, None]
    lap -= np.einsum("ij,ij->i", lap, values)[:, None] * values
    return lap / rho2[:, None]


def tension(u: DiscreteMap, metric: WeightedMetric = ROUND, rho2=None):
    """tau_g = rho^-2 P_{u-perp}(Delta u), exactly tangent at every vertex."""
    rho2 = _rho2(metric, u.mesh) if rho2 is None else rho2
    return _tension_from(_laplace(u), u.values, u.mesh.vertex_weight, rho2)


def tension_norm(u: DiscreteMap, metric: WeightedMetric = ROUND, tau=None, rho2=None):
    """||tau_g||_{L^2(g)} with the lumped mass of g = rho^2 g_{S^2}."""
    rho2 = _rho2(metric, u.mesh) if rho2 is None else rho2
    tau = tension(u, metric, rho2) if tau is None else tau
    return float(np.sqrt(np.sum(u.mesh.vertex_weight * rho2 * np.sum(tau * tau, axis=1))))


def stability_limit(mesh, rho2, safety=0.2):
    diag = mesh.laplacian.diagonal()
    return float(safety * np.min(rho2 * mesh.vertex_weight / diag))


@dataclass(frozen=True, eq=False)
class FlowState:
    t: float
    u: DiscreteMap
    metric: WeightedMetric
    travel: float = 0.0
    defect_history: tuple = ()
    step_count: int = 0
    energy: float = float("nan")
    defect_offset: float = 0.0

    @classmethod
    def start(cls, u, metric=ROUND, defect_offset=None):
        E = dirichlet_energy(u)
        if defect_offset is None:
            defect_offset = FOUR_PI * abs(degree(u))
        return cls(0.0, u, metric, 0.0, ((0.0, E - defect_offset),), 0, E, defect_offset)

    @property
    def defect(self):
        return self.energy - self.defect_offset


def flow_step(state: FlowState, dt: float, rho2=None, rtol=1e-12):
    """One explicit projected Euler step with rejection (dt halved on energy increase).

    Returns (new_state, dt_used, tension_norm_before).
    """
    u = state.u
    rho2 = _rho2(state.metric, u.mesh) if rho2 is None else rho2
    mass = u.mesh.vertex_weight
    tau = tension(u, state.metric, rho2)
    tn = float(np.sqrt(np.sum(mass * rho2 * np.sum(tau * tau, axis=1))))
    E0 = state.energy if np.isfinite(state.energy) else dirichlet_energy(u)
    if tn == 0.0:
        return replace(state, t=state.t + dt), dt, 0.0
    while True:
        if dt < 1e-12:
            raise StalledFlowError(f"time step collapsed at t={state.t:.6g}")
        new = normalize(u.values + dt * tau)
        E1 = 0.5 * float(np.sum(new * (u.mesh.laplacian @ new)))
        if E1 <= E0 + rtol * E0:
            break
        dt *= 0.5
    v = u.with_values(new)
    hist = state.defect_history + ((state.t + dt, E1 - state.defect_offset),)
    return (FlowState(state.t + dt, v, state.metric, state.travel + dt * tn, hist, state.step_count + 1,
                      E1, state.defect_offset), dt, tn)


@dataclass
class StopCriteria:
    tension_tol: float | None = None     # absolute; None -> tension_rel * sqrt(E)
    tension_rel: float = 1e-6
    t_max: float = 50.0
    step_max: int = 200000
    dt_safety: float = 0.2
    rise_factor: float | None = None     # stop (and keep the best state) once tension exceeds this x its minimum
    min_energy: float | None = None      # stop once the energy has dropped to this level

    def threshold(self, E):
        return self.tension_tol if self.tension_tol is not None else self.tension_rel * math.sqrt(max(E, 1e-300))


@dataclass
class FlowResult:
    u: DiscreteMap
    converged: bool
    reason: str
    travel: float
    defect_initial: float
    defect_final: float
    singular_events: list
    t: float
    steps: int
    tension_final: float
    displacement: float
    travel_bound_ok: bool
    history: dict = field(repr=False, default_factory=dict)

    def summary(self):
        return {k: getattr(self, k) for k in ("converged", "reason", "travel", "defect_initial", "defect_final",
                                              "t", "steps", "tension_final", "displacement", "travel_bound_ok")} | {
            "singular_events": [{"t": t, "center": [float(c) for c in b.center], "radius": b.radius, "drop": d}
                                for t, b, d in self.singular_events]}


def _vertex_energy(u):
    e = face_energies(u) / 3.0
    return np.bincount(u.mesh.faces.ravel(), weights=np.repeat(e, 3), minlength=u.mesh.n_vertices)


def _detect_events(mesh, e_old, e_new, t, threshold=0.5):
    drop = e_old - e_new
    ring = mesh.neighbors @ drop + drop
    i = int(np.argmax(ring))
    if ring[i] <= threshold:
        return None
    nb = mesh.neighbors[i].indices
    r = float(np.max(np.arccos(np.clip(mesh.vertices[nb] @ mesh.vertices[i], -1, 1)))) * 1.01
    return (t, GeodesicBall(mesh.vertices[i], r), float(ring[i]))


class _SemiImplicit:
    """(M rho^2 + dt L) u* = M rho^2 u + dt M lambda u, lambda = <M^-1 L u, u>."""

    def __init__(self, mesh, rho2):
        self.mesh = mesh
        self.mr = mesh.vertex_weight * rho2
        self.dt = None
        self.lu = None

    def solve(self, values, Lu, dt):
        if dt != self.dt:
            A = (sp.diags(self.mr) + dt * self.mesh.laplacian).tocsc()
            self.lu = splu(A)
            self.dt = dt
        lam = np.einsum("ij,ij->i", Lu, values)
        rhs = self.mr[:, None] * values + dt * lam[:, None] * values
        return normalize(self.lu.solve(rhs))


def run_flow(u0: DiscreteMap, metric: WeightedMetric = ROUND, stop: StopCriteria | None = None,
             scheme="explicit", dt=None, snapshot_every=None, observer=None, defect_offset=None,
             event_every=500, record_every=1, dt_growth=1.25):
    """Integrate the weighted flow until the tension threshold or a limit is hit.

    scheme "explicit" is projected forward Euler at the stability limit;
    "semi-implicit" treats the Laplacian implicitly (dt given or 10x the
    explicit limit, grown while steps are accepted).  `observer` receives
    snapshot dicts every `snapshot_every` accepted steps.
    """
    stop = stop or StopCriteria()
    mesh = u0.mesh
    rho2 = _rho2(metric, mesh)
    mass = mesh.vertex_weight
    L = mesh.laplacian
    try:
        k0 = degree(u0)
    except DegreeAmbiguousError:
        k0 = 0
    offset = FOUR_PI * abs(k0) if defect_offset is None else defect_offset
    values = u0.values.copy()
    Lu = L @ values
    E = 0.5 * float(np.sum(values * Lu))
    E0 = E
    dt_lim = stability_limit(mesh, rho2, stop.dt_safety)
    if scheme == "explicit":
        dt_cur = dt_lim if dt is None else min(dt, dt_lim)
    elif scheme == "semi-implicit":
        dt_cur = 10 * dt_lim if dt is None else dt
        solver = _SemiImplicit(mesh, rho2)
    else:
        raise ValueError(f"unknown scheme {scheme}")
    t, travel, steps = 0.0, 0.0, 0
    hist_t, hist_E, hist_tau2, hist_travel, hist_diss = [], [], [], [], []
    events = []
    e_ref = _vertex_energy(u0) if event_every else None
    reason = "max-steps"
    converged = False

    def tension_now(vals, Lu_):
        tau = _tension_from(Lu_, vals, mass, rho2)
        return tau, float(np.sqrt(np.sum(mass * rho2 * np.sum(tau * tau, axis=1))))

    tau, tn = tension_now(values, Lu)
    diss = 0.0
    best = (tn, values, E, t, travel, steps)
    while True:
        if stop.rise_factor is not None:
            if tn < best[0]:
                best = (tn, values, E, t, travel, steps)
            elif tn > stop.rise_factor * best[0]:
                tn, values, E, t, travel, steps = best
                Lu = L @ values
                reason = "tension-minimum"
                break
        if steps % record_every == 0:
            hist_t.append(t)
            hist_E.append(E)
            hist_tau2.append(tn * tn)
            hist_travel.append(travel)
            hist_diss.append(diss)
        if observer is not None and snapshot_every and steps % snapshot_every == 0:
            h, a = energy_split(DiscreteMap(values, mesh))
            observer({"t": t, "E": E, "E_holo": h, "E_anti": a, "defect": E - offset,
                      "tension_l2_g": tn, "travel": travel})
        if tn < stop.threshold(E):
            converged, reason = True, "tension-below-threshold"
            break
        if stop.min_energy is not None and E <= stop.min_energy:
            reason = "energy-budget"
            break
        if t >= stop.t_max:
            reason = "max-time"
            break
        if steps >= stop.step_max:
            reason = "max-steps"
            break
        h = dt_cur
        E1 = E
        while True:
            if h < 1e-12:
                exc = StalledFlowError(f"time step collapsed at t={t:.6g} (trial energy {E1!r}, current {E!r}, "
                                       f"tension {tn:.3g})")
                exc.history = {"t": np.array(hist_t), "E": np.array(hist_E), "tau2": np.array(hist_tau2)}
                raise exc
            if scheme == "explicit":
                new = normalize(values + h * tau)
            else:
                new = solver.solve(values, Lu, h)
            Lnew = L @ new
            E1 = 0.5 * float(np.sum(new * Lnew))
            if E1 <= E + 1e-10 * E:
                break
            h *= 0.5
        if scheme == "explicit":
            step_travel = h * tn
            diss += h * tn * tn
        else:
            dv = new - values
            step_travel = float(np.sqrt(np.sum(mass * rho2 * np.sum(dv * dv, axis=1))))
            diss += step_travel ** 2 / h
            if h == dt_cur:
                dt_cur = min(dt_cur * dt_growth, 1e3 * dt_lim * 10)
            else:
                dt_cur = h
        values, Lu, E = new, Lnew, E1
        t += h
        travel += step_travel
        steps += 1
        tau, tn = tension_now(values, Lu)
        if event_every and steps % event_every == 0:
            cur = DiscreteMap(values, mesh)
            e_new = _vertex_energy(cur)
            ev = _detect_events(mesh, e_ref, e_new, t)
            if ev is not None:
                events.append(ev)
            e_ref = e_new
            try:
                degree(cur)
            except DegreeAmbiguousError:
                events.append((t, GeodesicBall(mesh.vertices[0], np.pi), float("nan")))
    uf = DiscreteMap(values, mesh)
    disp = weighted_l2_distance(u0, uf, rho2)
    history = {"t": np.array(hist_t), "E": np.array(hist_E), "tau2": np.array(hist_tau2),
               "travel": np.array(hist_travel), "dissipation": np.array(hist_diss)}
    return FlowResult(uf, converged, reason, travel, E0 - offset, E - offset, events, t, steps, tn,
                      disp, disp <= 1.01 * travel + 1e-15, history)


# ---------------------------------------------------------------- cut-offs

@dataclass(frozen=True, eq=False)
class CutoffFunction:
    values: np.ndarray
    ball: GeodesicBall
    gradient_bound: float
    mesh: object = field(repr=False, default=None)

    def weighted_gradient_bound(self, metric: WeightedMetric):
        """sup rho^-1 |d phi| over faces (the L-infinity norm of d phi in g)."""
        g = _cutoff_face_gradient(self.mesh, self.values)
        rho = np.sqrt(metric.rho2(self.mesh.face_centroid))
        return float(np.max(g / rho))


def _cutoff_face_gradient(mesh, phi):
    fr = mesh.face_frame
    F = mesh.faces
    a = (phi[F[:, 1]] - phi[F[:, 0]]) / fr["p1"]
    b = (phi[F[:, 2]] - phi[F[:, 0]] - fr["q1"] * a) / fr["q2"]
    return np.sqrt(a * a + b * b)


def cutoff_profile(d, r):
    s = np.clip((r - np.asarray(d)) / (r / 2), 0.0, 1.0)
    return s * s * (3 - 2 * s)


def build_cutoff(x, r, mesh):
    """Radial smoothstep: 1 on B_{r/2}(x), 0 outside B_r(x), slope at most 3/r."""
    if not 0 < r <= np.pi:
        raise ValueError("cutoff radius must lie in (0, pi]")
    ball = GeodesicBall(x, r)
    phi = cutoff_profile(ball.distance(mesh.vertices), r)
    g = float(np.max(_cutoff_face_gradient(mesh, phi)))
    return CutoffFunction(phi, ball, g, mesh)


def cutoff_energy(u: DiscreteMap, phi: CutoffFunction, metric: WeightedMetric = ROUND):
    """E_phi = 1/2 int phi^2 |du|^2 (conformally invariant, the metric is bookkeeping only)."""
    w = np.mean(phi.values[u.mesh.faces] ** 2, axis=1)
    return float(np.sum(w * face_energies(u)))


# ---------------------------------------------------------------- Lojasiewicz probe

@dataclass(frozen=True)
class LojasiewiczProbe:
    ratio: float
    defect: float
    tension2: float
    log_factor: float
    hypothesis_product: float
    admissible: bool


def lojasiewicz_ratio(u: DiscreteMap, metric: WeightedMetric, radii, defect=None, eps=1.0,
                      defect_tol=1e-12):
    """delta / [(1 + max |log r_i|) ||tau_g||^2], with the smallness product reported.

    `defect` overrides E - 4 pi |deg| (for instance a defect measured against
    the discrete harmonic limit on the same mesh).
    """
    radii = list(radii) or [np.pi / 2]
    d = dirichlet_energy(u) - FOUR_PI * abs(degree(u)) if defect is None else defect
    t2 = tension_norm(u, metric) ** 2
    logf = 1 + max(abs(math.log(r)) for r in radii)
    prod = max(d, 0.0) * float(np.prod([1 + abs(math.log(r)) for r in radii]))
    if d <= defect_tol:
        return LojasiewiczProbe(0.0, d, t2, logf, prod, prod <= eps)
    if t2 < 1e-28:
        raise ResolutionError("tension vanishes while the defect does not")
    return LojasiewiczProbe(d / (logf * t2), d, t2, logf, prod, prod <= eps)


def write_snapshots(path):
    """Observer writing newline-delimited JSON records."""
    fh = open(path, "w")

    def obs(rec):
        fh.write(json.dumps({k: float(v) for k, v in rec.items()}) + "\n")
        fh.flush()
    obs.close = fh.close
    return obs
