"""Multi-scale extraction of rational maps from a map with small energy defect.

Every gauge is kept as a Mobius matrix G taking the input domain to the
current view.  Balls chosen in a view are pulled back to exact caps of the
input sphere and view metrics are pulled back to conformal weights on the
input mesh, so all flows, replacements and fits run on the input mesh and no
resampling is needed.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import spsolve
from scipy.spatial import cKDTree

from .errors import (AnnulusSearchError, ClusteringError, InconsistentDegreeError, InvariantError,
                     ReplacementUnsafeError, ResolutionError)
from .map_calculus import (DiscreteMap, RationalMap, degree, dirichlet_energy, face_energies,
                           face_gradients, h1_distance, sample_rational, values_oscillation)
from .sphere_geometry import (GeodesicBall, Mobius, MobiusDilation, WeightedMetric,
                              normalize)
from .weighted_flow import StopCriteria, run_flow

FOUR_PI = 4 * np.pi


@dataclass(frozen=True, eq=False)
class ConcentrationBall:
    center: np.ndarray
    radius: float
    annulus_factor: float
    local_degree: int
    index: int
    energy: float = float("nan")

    @property
    def ball(self):
        return GeodesicBall(self.center, self.radius)

    def moved(self, G: Mobius):
        b = G.image_of_ball(self.ball)
        return ConcentrationBall(b.center, b.radius, self.annulus_factor, self.local_degree, self.index,
                                 self.energy)

    def to_dict(self):
        return {"center": [float(t) for t in self.center], "radius": self.radius,
                "annulus_factor": self.annulus_factor, "local_degree": self.local_degree, "index": self.index}


@dataclass(frozen=True)
class ScaleSplit:
    captured: tuple
    deferred: tuple
    s_star: float
    S_star: float
    alpha_current: float
    resolution_limited: bool = False


@dataclass(frozen=True, eq=False)
class Domain:
    """Enclosing cap (None: the whole sphere) minus excluded caps."""

    outer: GeodesicBall | None
    excluded: tuple = ()

    def contains(self, x):
        x = np.atleast_2d(x)
        m = np.ones(len(x), bool) if self.outer is None else self.outer.contains(x)
        for b in self.excluded:
            m &= ~b.contains(x)
        return m

    def to_dict(self):
        o = self.outer
        return {"center": None if o is None else [float(t) for t in o.center],
                "radius": float(np.pi) if o is None else o.radius,
                "excluded": [b.to_dict() for b in self.excluded]}


@dataclass(eq=False)
class DecompositionComponent:
    rational_fit: RationalMap
    domain: Domain
    gauges: list
    diagnostics: dict
    vertices: np.ndarray = field(repr=False, default=None)
    gauge_chain: Mobius = field(repr=False, default=None)
    view_domain: Domain = field(repr=False, default=None)
    flowed: DiscreteMap = field(repr=False, default=None)

    @property
    def degree(self):
        return self.rational_fit.degree

    def rho2(self, x):
        if not self.gauges:
            return np.ones(len(np.atleast_2d(x)))
        return sum(M.conformal_factor(x) ** 2 for M in self.gauges)

    def to_dict(self):
        return {"rational_map": self.rational_fit.to_dict(), "domain": self.domain.to_dict(),
                "gauges": [M.to_dict() for M in self.gauges],
                "diagnostics": {k: _jsonable(v) for k, v in self.diagnostics.items()}}


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (list, tuple)):
        return [_jsonable(t) for t in v]
    if isinstance(v, dict):
        return {k: _jsonable(t) for k, t in v.items()}
    return v


@dataclass(eq=False)
class BubbleDecomposition:
    components: list
    input_defect: float
    total_degree: int
    recursion_log: dict
    balls: list = field(default_factory=list)
    flags: dict = field(default_factory=dict)

    def partition(self, n):
        lab = np.full(n, -1)
        for i, c in enumerate(self.components):
            lab[c.vertices] = i
        return lab

    def to_dict(self):
        return {"components": [c.to_dict() for c in self.components], "input_defect": self.input_defect,
                "total_degree": self.total_degree, "recursion_log": _jsonable(self.recursion_log),
                "flags": _jsonable(self.flags)}


# ---------------------------------------------------------------- energy atoms

class _Atoms:
    """Face energies located at face centroids, optionally seen through a gauge."""

    def __init__(self, v: DiscreteMap, G: Mobius | None = None):
        self.mesh = v.mesh
        self.e = face_energies(v)
        pos = v.mesh.face_centroid
        cand = v.mesh.vertices
        if G is not None:
            pos, cand = G.apply(pos), G.apply(cand)
        self.pos, self.cand = pos, cand
        self.tree = cKDTree(pos)
        self.ctree = cKDTree(cand)

    def ball_energy(self, centers, r, mask):
        """Energy of unmasked atoms in B_r(c) for each center."""
        centers = np.atleast_2d(centers)
        chord = 2 * math.sin(min(r, math.pi) / 2)
        if r >= math.pi:
            return np.full(len(centers), float(self.e[mask].sum()))
        counts = self.tree.query_ball_point(centers, chord * (1 + 1e-12), return_length=True)
        out = np.zeros(len(centers))
        budget = 4_000_000
        start = 0
        while start < len(centers):
            stop = start + max(1, int(np.searchsorted(np.cumsum(counts[start:]), budget)))
            ct = cKDTree(centers[start:stop])
            D = ct.sparse_distance_matrix(self.tree, chord * (1 + 1e-12), output_type="coo_matrix")
            w = self.e[D.col] * mask[D.col]
            out[start:stop] = np.bincount(D.row, weights=w, minlength=stop - start)
            start = stop
        return out

    def thinned(self, spacing, subset=None):
        """Deterministic subset of candidates (one per grid cell of size `spacing`)."""
        idx = np.arange(len(self.cand)) if subset is None else np.asarray(subset)
        if spacing <= 0 or len(idx) == 0:
            return idx
        key = np.floor(self.cand[idx] / spacing).astype(np.int64)
        _, first = np.unique(key, axis=0, return_index=True)
        return idx[np.sort(first)]


def _sup_ball(atoms: _Atoms, r, mask, exhaustive=False, n_top=3):
    """(sup_x E(B_r(x)), argmax) over mesh vertices, coarse-to-fine.

    Candidates on a grid of spacing r/2 are scored; around the best few the
    grid is refined by 4 each round (search radius shrinking with it) until
    every vertex in the local window is scored.
    """
    if exhaustive:
        en = atoms.ball_energy(atoms.cand, r, mask)
        i = int(np.argmax(en))
        return float(en[i]), i
    chord = 2 * math.sin(min(r, math.pi) / 2)
    sub = atoms.thinned(chord / 2)
    en = atoms.ball_energy(atoms.cand[sub], r, mask)
    best_e, best_i = -1.0, -1
    for j in np.argsort(-en, kind="stable")[:n_top]:
        ci, ce, win = int(sub[j]), float(en[j]), chord / 2 * math.sqrt(3)
        while True:
            local = np.asarray(atoms.ctree.query_ball_point(atoms.cand[ci], win * 1.05), dtype=int)
            step = win / 4
            pick = atoms.thinned(step, local) if len(local) > 64 else local
            e2 = atoms.ball_energy(atoms.cand[pick], r, mask)
            k = int(np.argmax(e2))
            if e2[k] > ce:
                ci, ce = int(pick[k]), float(e2[k])
            if len(pick) == len(local):
                break
            win = step * math.sqrt(3)
        if ce > best_e:
            best_e, best_i = ce, ci
    return best_e, best_i


def _annulus_profile(atoms, x, r, lambdas, mask):
    d = np.arccos(np.clip(atoms.pos @ x, -1, 1))
    e = np.where(mask, atoms.e, 0.0)
    order = np.argsort(d)
    cum = np.concatenate([[0.0], np.cumsum(e[order])])
    ds = d[order]

    def within(rad):
        return cum[np.searchsorted(ds, rad, side="left")]
    return np.array([within(2 * lam * r) - within(lam * r) for lam in lambdas])


def choose_annulus_factor(profile, lambdas, eps2):
    """First grid point past a descent where the annulus energy is <= eps2 and stops decreasing.

    Requiring a descent into the point skips lambda = 1, which is a trivial
    boundary minimum while the annulus still sweeps through the ball's own bubble.
    """
    n = len(profile)
    for j in range(1, n):
        if profile[j] <= eps2 and profile[j] <= profile[j - 1] and (j == n - 1 or profile[j + 1] >= profile[j]):
            return float(lambdas[j])
    return None


# ---------------------------------------------------------------- replacement

def _replace_region(u: DiscreteMap, inside: np.ndarray, max_osc=0.5, check=True):
    mesh = u.mesh
    I = np.flatnonzero(inside)
    if len(I) == 0:
        return u, 0.0
    nb = mesh.neighbors
    touch = np.asarray(nb[I].sum(axis=0)).ravel() > 0
    Bd = np.flatnonzero(touch & ~inside)
    if len(Bd) == 0:
        raise ReplacementUnsafeError(float("nan"), max_osc)
    osc = values_oscillation(u.values[Bd])
    if check and osc >= max_osc:
        raise ReplacementUnsafeError(osc, max_osc)
    L = mesh.laplacian
    LII = L[I][:, I].tocsc()
    LIB = L[I][:, Bd]
    rhs = -(LIB @ u.values[Bd])
    h = spsolve(LII, rhs)
    h = np.atleast_2d(h)
    nrm = np.linalg.norm(h, axis=1)
    if np.min(nrm) < 1e-8:
        raise ReplacementUnsafeError(osc, max_osc)
    vals = u.values.copy()
    vals[I] = h / nrm[:, None]
    return DiscreteMap(vals, mesh), osc


def harmonic_replace(u: DiscreteMap, ball: GeodesicBall, max_osc=0.5, complement=False):
    """Replace u inside `ball` (or outside it) by the normalized discrete harmonic extension."""
    inside = ball.contains(u.mesh.vertices)
    if complement:
        inside = ~inside
    return _replace_region(u, inside, max_osc)[0]


def replaced_patch_energy(u: DiscreteMap, ball: GeodesicBall, max_osc=0.5):
    """(energy of the replaced patch, boundary oscillation) for a harmonic replacement."""
    inside = ball.contains(u.mesh.vertices)
    w, osc = _replace_region(u, inside, max_osc)
    sel = inside[u.mesh.faces].any(axis=1)
    return float(face_energies(w)[sel].sum()), osc


def _best_cut(u: DiscreteMap, G, x_view, r_lo, r_hi, n=8):
    """Radius in [r_lo, r_hi] (view) whose boundary ring has the smallest oscillation."""
    Ginv = G.inverse()
    best = None
    for rad in np.geomspace(r_lo, min(r_hi, math.pi * 0.999), n):
        b = Ginv.image_of_ball(GeodesicBall(x_view, rad))
        inside = b.contains(u.mesh.vertices)
        I = np.flatnonzero(inside)
        if len(I) == 0 or len(I) == u.mesh.n_vertices:
            continue
        touch = np.asarray(u.mesh.neighbors[I].sum(axis=0)).ravel() > 0
        Bd = np.flatnonzero(touch & ~inside)
        osc = values_oscillation(u.values[Bd])
        if best is None or osc < best[0]:
            best = (osc, b, rad)
    return best


# ---------------------------------------------------------------- ball selection

def select_balls(v: DiscreteMap, eps1=0.5, eps2=1.5, lambda0=128.0, k=None, G: Mobius | None = None,
                 max_cap_osc=1.4, n_lambda=32, rtol=1e-3):
    """Concentration balls (in the view given by G) with annulus factors and local degrees."""
    k = degree(v) if k is None else k
    E = dirichlet_energy(v)
    if k < 1:
        raise InvariantError("ball selection needs degree >= 1")
    if eps1 >= E:
        raise InvariantError("eps1 must be below the energy")
    atoms = _Atoms(v, G)
    mask = np.ones(len(atoms.e), bool)
    lambdas = np.geomspace(1.0, lambda0, n_lambda)
    balls = []
    while mask.any() and atoms.e[mask].sum() >= eps1:
        if len(balls) >= k:
            raise InconsistentDegreeError(f"more than k={k} concentration balls")
        lo, hi = 0.25 * float(atoms.mesh.edge_length.min()), math.pi
        while hi / lo > 1 + rtol:
            mid = math.sqrt(lo * hi)
            if _sup_ball(atoms, mid, mask)[0] >= eps1:
                hi = mid
            else:
                lo = mid
        r = hi
        en, i = _sup_ball(atoms, r, mask)
        x = atoms.cand[i]
        prof = _annulus_profile(atoms, x, r, lambdas, mask)
        lam = choose_annulus_factor(prof, lambdas, eps2)
        if lam is None:
            raise AnnulusSearchError(f"no annulus factor in [1, {lambda0}] with energy <= {eps2}; "
                                     "increase lambda0 or eps2")
        d = np.arccos(np.clip(atoms.pos @ x, -1, 1))
        captured = mask & (d < lam * r)
        balls.append(ConcentrationBall(x, r, lam, 0, len(balls), float(atoms.e[captured].sum())))
        mask &= ~captured
    if not balls:
        raise InvariantError("no concentration ball found")
    return assign_local_degrees(v, balls, G, max_cap_osc)


def assign_local_degrees(v: DiscreteMap, balls, G=None, max_cap_osc=1.4):
    """k_i = degree of the capped map: v kept near ball i, harmonic elsewhere, balls removed in order."""
    G = Mobius.identity() if G is None else G
    rest = v
    out = []
    for b in balls:
        cut = _best_cut(rest, G, b.center, b.annulus_factor * b.radius, 2 * b.annulus_factor * b.radius)
        if cut is None:
            k_i = degree(rest)
            out.append(ConcentrationBall(b.center, b.radius, b.annulus_factor, k_i, b.index, b.energy))
            continue
        osc, cap, _ = cut
        capped, _ = _replace_region(rest, ~cap.contains(v.mesh.vertices), max_cap_osc)
        k_i = degree(capped)
        rest, _ = _replace_region(rest, cap.contains(v.mesh.vertices), max_cap_osc)
        out.append(ConcentrationBall(b.center, b.radius, b.annulus_factor, k_i, b.index, b.energy))
    total = sum(b.local_degree for b in out)
    if total != degree(v) or any(b.local_degree < 1 for b in out):
        raise InconsistentDegreeError(f"local degrees {[b.local_degree for b in out]} vs degree {degree(v)}")
    return out


def rescale_gauge(v: DiscreteMap, balls, target_index=None, lambda_bar=4.0):
    """Regauge so the largest ball becomes B_{lambda_bar r}(x) -> hemisphere.

    Returns (v o M^-1 resampled, transformed balls, M); M is None when the
    largest radius is already >= pi / (2 lambda_bar).
    """
    if target_index is None:
        target_index = int(np.argmax([b.radius for b in balls]))
    b = balls[target_index]
    if b.radius >= math.pi / (2 * lambda_bar):
        return v, list(balls), None
    M = MobiusDilation(b.center, lambda_bar * b.radius)
    moved = [c.moved(M.mobius) for c in balls]
    vr = resample(v, M.inverse().mobius)
    return vr, moved, M


def resample(v: DiscreteMap, A: Mobius):
    """v o A on the same mesh (exact with a source, else linear interpolation)."""
    pts = A.apply(v.mesh.vertices)
    if v.source is not None:
        vals = normalize(v.source(pts))
    else:
        vals = _interpolate(v, pts)
    out = DiscreteMap(vals, v.mesh, None if v.source is None else (lambda x, f=v.source: f(A.apply(x))))
    if degree(out) != degree(v):
        raise ResolutionError("resampling changed the degree")
    return out


def _interpolate(v: DiscreteMap, pts):
    mesh = v.mesh
    tree = cKDTree(mesh.face_centroid)
    _, cand = tree.query(pts, k=min(12, mesh.n_faces))
    a, b, c = mesh.face_corners
    out = np.empty_like(pts)
    for i, p in enumerate(pts):
        best = None
        for f in cand[i]:
            T = np.column_stack([a[f], b[f], c[f]])
            lam = np.linalg.solve(T, p)
            lam = lam / lam.sum()
            score = lam.min()
            if best is None or score > best[0]:
                best = (score, f, lam)
            if score >= -1e-12:
                break
        _, f, lam = best
        lam = np.clip(lam, 0, None)
        lam /= lam.sum()
        out[i] = v.values[mesh.faces[f]].T @ lam
    return normalize(out)


# ---------------------------------------------------------------- scales and clusters

def split_scales(radii, delta, alpha, scale_floor=0.5):
    """Descending greedy grouping by the gap delta^(-3 alpha_eff).

    alpha_eff = min(alpha, log(scale_floor)/log(delta)) keeps delta^alpha_eff
    >= scale_floor so the split stays resolvable on a mesh.
    """
    radii = np.asarray(radii, float)
    if len(radii) == 0:
        raise ValueError("no balls to split")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    cap = math.log(scale_floor) / math.log(delta)
    a_eff = min(alpha, cap)
    q = delta ** a_eff
    gap = q ** -3
    order = np.argsort(-radii, kind="stable")
    I1 = [int(order[0])]
    j = 1
    while j < len(order) and radii[order[j - 1]] / radii[order[j]] <= gap:
        I1.append(int(order[j]))
        j += 1
    deferred = tuple(int(t) for t in order[j:])
    smin = float(radii[I1].min())
    return ScaleSplit(tuple(I1), deferred, q * q * smin, q * smin, a_eff, a_eff < alpha)


def cluster_balls(centers, S_star, s_star=None, margin=0.25, max_factor=64.0):
    """Disjoint cluster balls around deferred centers (groups of overlapping S*-balls)."""
    centers = normalize(np.atleast_2d(np.asarray(centers, float)))
    s_star = S_star / 2 if s_star is None else s_star
    n = len(centers)
    if n == 0:
        raise ValueError("no deferred balls")
    d = np.arccos(np.clip(centers @ centers.T, -1, 1))
    A = sp.csr_matrix(d < 2 * S_star)
    _, lab = connected_components(A, directed=False)
    while True:
        groups = [np.flatnonzero(lab == g) for g in np.unique(lab)]
        balls = []
        for g in groups:
            c = normalize(centers[g].sum(axis=0)) if len(g) > 1 else centers[g[0]]
            spread = float(np.max(np.arccos(np.clip(centers[g] @ c, -1, 1))))
            R = max(2 * S_star, (spread + s_star) / (1 - margin))
            if R > max_factor * S_star:
                raise ClusteringError("cluster radius exceeds the allowed multiple of S*")
            balls.append(GeodesicBall(c, R))
        merged = False
        for i in range(len(balls)):
            for j in range(i + 1, len(balls)):
                dij = math.acos(float(np.clip(balls[i].center @ balls[j].center, -1, 1)))
                if dij < balls[i].radius + balls[j].radius:
                    lab[np.isin(lab, [lab[groups[j][0]]])] = lab[groups[i][0]]
                    merged = True
                    break
            if merged:
                break
        if not merged:
            return balls, [list(map(int, g)) for g in groups]


# ---------------------------------------------------------------- extraction

def _view_metric(balls, indices, radius_of, includes_base=True):
    dil = []
    for i in indices:
        r = radius_of(i)
        if r < math.pi / 2:
            dil.append(MobiusDilation(balls[i].center, r))
    return WeightedMetric(tuple(dil), includes_base or not dil)


def _flow(u, metric, cfg, budget=None):
    """Semi-implicit flow; stops once `budget` energy is dissipated.

    The continuum flow can dissipate at most the defect; on a mesh it keeps
    going along the slow discrete Mobius drift, which only degrades the map.
    """
    floor = None if budget is None else dirichlet_energy(u) - budget
    stop = StopCriteria(tension_rel=cfg.decomp_tension_rel, t_max=cfg.decomp_t_max,
                        step_max=cfg.decomp_step_max, rise_factor=2.0, min_energy=floor)
    return run_flow(u, metric, stop, scheme="semi-implicit", event_every=0, dt_growth=2.0)


def extract_component(v: DiscreteMap, split: ScaleSplit, balls, G: Mobius, cfg, outer=None,
                      foreign=(), defect=None, rng=None):
    """Three-step extraction in the view G.

    balls: ConcentrationBalls in view coordinates (indexable by split indices
    and by `foreign`, the balls handled elsewhere).  Returns the component,
    the cluster balls (view), their index groups and the modified map.
    """
    from .sharp_family import fit_best_rational
    if not split.captured:
        raise InvariantError("split.captured is empty")
    Ginv = G.inverse()
    byidx = {b.index: b for b in balls}
    cap_idx = list(split.captured)
    slow_idx = list(split.deferred) + list(foreign)

    def rad(i):
        return byidx[i].radius if i in cap_idx else split.s_star

    g1 = _view_metric(byidx, cap_idx + slow_idx, rad)
    log = {"captured": cap_idx, "deferred": list(split.deferred), "foreign": list(foreign),
           "s_star": split.s_star, "S_star": split.S_star, "alpha": split.alpha_current,
           "resolution_limited": split.resolution_limited}
    budget = None if defect is None else max(defect, 0.0)
    step1 = _flow(v, g1.pullback(G), cfg, budget)
    omega_t = step1.u
    log["step1"] = {"reason": step1.reason, "steps": step1.steps, "t": step1.t}
    clusters_view, groups = [], []
    if split.deferred:
        clusters_view, groups = cluster_balls([byidx[i].center for i in split.deferred], split.S_star,
                                              split.s_star, cfg.annulus_margin)
        groups = [[list(split.deferred)[j] for j in g] for g in groups]
    clusters = [Ginv.image_of_ball(b) for b in clusters_view]
    vt = omega_t
    removed = []
    verts = v.mesh.vertices
    for b in clusters:
        vt, osc = _replace_region(vt, b.contains(verts), cfg.max_cut_osc)
        removed.append(osc)
    if outer is not None:
        vt, osc = _replace_region(vt, ~outer.contains(verts), cfg.max_cut_osc)
        removed.append(osc)
    deg_t = degree(vt)
    e_before = dirichlet_energy(omega_t)
    e_after = dirichlet_energy(vt)
    log["step2"] = {"cut_osc": removed, "energy_before": e_before, "energy_after": e_after,
                    "degree": deg_t}
    if deg_t < 1:
        raise InconsistentDegreeError("component degree dropped below 1")
    expected = sum(byidx[i].local_degree for i in cap_idx)
    if deg_t != expected:
        warnings.warn(f"component degree {deg_t} differs from captured local degrees {expected}")
    if clusters or outer is not None:
        g1t = _view_metric(byidx, cap_idx, rad)
        # the cut energy near a short neck is shed by sliding the whole component
        # (a Mobius drift away from v), so only the input defect may be dissipated
        b3 = budget
        step3 = _flow(vt, g1t.pullback(G), cfg, b3)
        omega = step3.u
        log["step3"] = {"reason": step3.reason, "steps": step3.steps, "t": step3.t}
    else:
        omega = omega_t
    # component gauges: dilations of the enlarged captured balls, seen in the input domain
    gauges = []
    for i in cap_idx:
        r = min(cfg.lambda_bar * byidx[i].radius, math.pi / 2)
        if r < math.pi / 2:
            gauges.append((MobiusDilation(byidx[i].center, r).mobius @ G).equivalent_dilation())
        else:
            gauges.append(G.equivalent_dilation())
    seed_balls = [Ginv.image_of_ball(GeodesicBall(byidx[i].center, min(byidx[i].radius * cfg.lambda_bar,
                                                                        math.pi / 2))) for i in cap_idx]
    dom = Domain(outer, tuple(clusters))
    # fit on the domain only: the harmonic fills outside it are not part of the component
    region = dom.contains(verts).astype(float)
    rho2 = sum(M.conformal_factor(verts) ** 2 for M in gauges)
    fit = fit_best_rational(omega, deg_t, "weighted_by_omega", balls=seed_balls, rng=rng,
                            n_starts=cfg.fit_starts, region=region, weight=rho2)
    vdom = Domain(None if outer is None else G.image_of_ball(outer), tuple(clusters_view))
    comp = DecompositionComponent(fit.best, dom, gauges, {"degree": deg_t, "fit_dist_flowed": fit.dist_w},
                                  None, G, vdom, omega)
    log["fit"] = {"dist_to_flowed": fit.dist_w, "starts": fit.starts_used}
    return comp, clusters_view, groups, vt, log


def _alpha_schedule(alpha, k, depth):
    return (4 * k) ** max(k - depth, 0) * alpha


def bubble_decompose(v: DiscreteMap, config=None, defect=None, reference=None, rng=None):
    """Decompose v into rational components on disjoint domains (depth-first over clusters)."""
    from .harness import RunConfig
    from .sharp_family import fit_best_rational
    cfg = config or RunConfig()
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    k = degree(v)
    if k < 1:
        raise InvariantError("decomposition needs degree >= 1")
    if defect is None:
        if reference is not None:
            defect = dirichlet_energy(v) - dirichlet_energy(reference) + FOUR_PI * (abs(degree(reference)) - k)
        else:
            defect = dirichlet_energy(v) - FOUR_PI * k
    delta = max(defect, 1e-300)
    mesh = v.mesh
    if delta >= cfg.delta_bar:
        res = _flow(v, WeightedMetric(), cfg)
        fit = fit_best_rational(res.u, k, rng=rng, n_starts=cfg.fit_starts)
        comp = DecompositionComponent(fit.best, Domain(None), [], {"degree": k}, np.arange(mesh.n_vertices),
                                      Mobius.identity(), Domain(None), res.u)
        dec = BubbleDecomposition([comp], defect, k, {"trivial": True}, [], {"trivial_fallback": True})
        return dec
    balls = select_balls(v, cfg.eps1, cfg.eps2, cfg.lambda0, k, None, cfg.max_cut_osc)
    flags = {"scale_resolution_limited": False, "warnings": []}
    components = []

    def recurse(G, view_balls, indices, outer, depth, alpha):
        if depth > k:
            raise InvariantError("recursion depth exceeds the degree")
        byidx = {b.index: b for b in view_balls}
        split = split_scales([byidx[i].radius for i in indices], delta, alpha, cfg.scale_floor)
        split = ScaleSplit(tuple(indices[j] for j in split.captured), tuple(indices[j] for j in split.deferred),
                           split.s_star, split.S_star, split.alpha_current, split.resolution_limited)
        flags["scale_resolution_limited"] |= split.resolution_limited
        foreign = [b.index for b in view_balls if b.index not in indices]
        comp, clusters_view, groups, _, log = extract_component(v, split, view_balls, G, cfg, outer, foreign,
                                                                defect, rng)
        comp.diagnostics["depth"] = depth
        components.append(comp)
        log["depth"] = depth
        log["gauge"] = G.equivalent_dilation().to_dict()
        log["children"] = []
        Ginv = G.inverse()
        for cb, grp in zip(clusters_view, groups):
            jt = max(grp, key=lambda i: byidx[i].radius)
            r = min(cfg.lambda_bar * byidx[jt].radius, math.pi / 2)
            M = MobiusDilation(byidx[jt].center, r).mobius
            if len(grp) > 1:
                flags["warnings"].append("multiple rescalings inside one cluster; constants compound")
            child_balls = [b.moved(M) for b in view_balls]
            child_outer = Ginv.image_of_ball(cb)
            log["children"].append(recurse(M @ G, child_balls, list(grp), child_outer, depth + 1,
                                           alpha / (4 * k)))
        return log

    G0 = Mobius.identity()
    big = max(balls, key=lambda b: b.radius)
    if big.radius < math.pi / (2 * cfg.lambda_bar):
        G0 = MobiusDilation(big.center, cfg.lambda_bar * big.radius).mobius
    view = [b.moved(G0) for b in balls]
    log = recurse(G0, view, [b.index for b in balls], None, 1, _alpha_schedule(cfg.alpha, k, 0))
    # vertex partition: each vertex goes to the deepest domain containing it
    _assign_vertices(components, mesh)
    dec = BubbleDecomposition(components, defect, k, log, balls, flags)
    if sum(c.degree for c in components) != k:
        raise InconsistentDegreeError("component degrees do not add up to the input degree")
    return dec


def _assign_vertices(components, mesh):
    x = mesh.vertices
    owner = np.full(mesh.n_vertices, -1)
    # components were appended depth first; domains nest, so later (deeper) owners win
    for i, c in enumerate(components):
        inside = np.ones(len(x), bool) if c.domain.outer is None else c.domain.outer.contains(x)
        owner[inside] = i
    for i, c in enumerate(components):
        c.vertices = np.flatnonzero(owner == i)
    # excluded caps of a domain are exactly the outer caps of its children; check it
    for i, c in enumerate(components):
        if np.any(~c.domain.contains(x[c.vertices])):
            raise InvariantError("partition inconsistent with the recorded domains")


# ---------------------------------------------------------------- key properties

def _complement_components(mesh, verts):
    mask = np.ones(mesh.n_vertices, bool)
    mask[verts] = False
    idx = np.flatnonzero(mask)
    if len(idx) == 0:
        return []
    A = mesh.neighbors[idx][:, idx]
    n, lab = connected_components(A, directed=False)
    return [idx[lab == j] for j in range(n)]


def verify_key_properties(d: BubbleDecomposition, v: DiscreteMap, C_fit=1.0):
    """K1-K4 per component and the H^1 bridge; pure diagnostic.

    The bridge constant is exact: -Delta omega = |grad omega|^2 omega gives
    int grad omega . grad(omega - v) = 1/2 int |grad omega|^2 |omega - v|^2,
    so sum_i int_{Omega_i} |grad(v - omega_i)|^2 = 2 delta + sum_i int |grad omega_i|^2 |v - omega_i|^2
    + 2 err, where err collects the integrals over the complements of Omega_i.
    """
    mesh = v.mesh
    x = mesh.vertices
    m = mesh.vertex_weight
    delta = max(d.input_defect, 1e-300)
    scale = delta * (1 + abs(math.log(delta)))
    comps = []
    lhs = W = err = 0.0
    for c in d.components:
        om = sample_rational(c.rational_fit, mesh)
        rho2 = c.rho2(x)
        dens = c.rational_fit.density(x)
        diff2 = np.sum((v.values - om.values) ** 2, axis=1)
        inside = np.zeros(mesh.n_vertices, bool)
        inside[c.vertices] = True
        k3 = float(np.sum((m * rho2 * diff2)[inside]))
        k3_full = float(np.sum(m * rho2 * diff2))
        k2 = float(np.max(dens / rho2))
        outs = _complement_components(mesh, c.vertices)
        osc_out = max((values_oscillation(om.values[o]) for o in outs), default=0.0)
        area_out = float(np.sum((m * rho2)[~inside]))
        h1 = h1_distance(v, om, c.vertices)
        lhs += h1
        W += float(np.sum(m * dens * diff2))
        # complement terms of the exact identity (faces not inside Omega_i)
        fin = inside[mesh.faces].all(axis=1)
        Ao, Bo = face_gradients(om)
        Dv = DiscreteMap(v.values, mesh)
        Av, Bv = face_gradients(Dv)
        area = mesh.face_area
        e_om = 0.5 * area * (np.sum(Ao * Ao, 1) + np.sum(Bo * Bo, 1))
        cross = area * (np.sum(Ao * (Ao - Av), 1) + np.sum(Bo * (Bo - Bv), 1))
        err += float(np.sum(e_om[~fin]) - np.sum(cross[~fin]))
        comps.append({"degree": c.degree, "k2_ratio": k2, "k3_dist2": k3, "k3_ratio": k3 / scale,
                      "k3_dist2_full": k3_full, "osc_out": osc_out, "area_out": area_out, "h1_err": h1,
                      "n_vertices": int(len(c.vertices))})
        c.diagnostics.update({"l2w_err": math.sqrt(k3), "h1_err": h1, "osc_out": osc_out, "area_out": area_out,
                              "k2_ratio": k2, "k3_ratio": k3 / scale})
    n = mesh.n_vertices
    lab = d.partition(n)
    counts = np.zeros(n, int)
    for c in d.components:
        counts[c.vertices] += 1
    rhs = 1.1 * (2 * d.input_defect + C_fit * W + 2 * abs(err))
    return {"components": comps, "degrees": [c.degree for c in d.components],
            "degree_sum_ok": sum(c.degree for c in d.components) == d.total_degree,
            "disjoint": bool(np.all(counts <= 1)), "covering": bool(np.all(lab >= 0)),
            "bridge_lhs": lhs, "bridge_W": W, "bridge_err": err, "bridge_rhs": rhs,
            "bridge_ok": lhs <= rhs, "defect": d.input_defect, "xi2_scale": scale}
