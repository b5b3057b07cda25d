"""Glued two-scale maps v_{a,mu}, best rational fits and the sharpness sweep."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .errors import FitFailure, HmflowError, ResolutionError
from .map_calculus import (DiscreteMap, RationalMap, dirichlet_energy,
                           h1_distance, sample_rational, weighted_l2_distance, xi_of)
from .sphere_geometry import (NORTH, Mobius, MobiusDilation, SphereMesh, build_icosphere, normalize,
                              rotation_about_y, rotation_to, to_homogeneous)


def sigma0(k: int) -> RationalMap:
    """pi(z (1 + z^(k-2))), the degree k-1 base map."""
    if k < 2:
        raise ValueError("sigma0 needs k >= 2")
    num = np.zeros(k, complex)
    num[1] += 1
    num[k - 1] += 1
    return RationalMap(num, [1])


def sigma_a(a: float, a_max=0.3) -> RationalMap:
    """R_a pi(1/z), the degree one bubble rotated by a about the y2 axis."""
    if not 0 < a <= a_max:
        raise ValueError(f"angle {a} outside (0, {a_max}]")
    return RationalMap([1], [0, 1], post_rotation=rotation_about_y(a))


@dataclass(frozen=True)
class GlueSpec:
    k: int
    mu: float
    a: float
    d_exp: float = 0.2
    a_max: float = 0.3

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be at least 2")
        if self.mu < 16:
            raise ValueError("mu must be at least 16")
        if not 0 < self.a <= self.a_max:
            raise ValueError(f"a = {self.a} outside (0, {self.a_max}]")
        if not 0 < self.d_exp < 0.25:
            raise ValueError("d_exp must lie in (0, 1/4)")

    @property
    def r_inner(self):
        return self.mu ** (-1 + self.d_exp)

    @property
    def r_outer(self):
        return self.mu ** (-self.d_exp)


def glue_rational(k, mu) -> RationalMap:
    """pi(p(z)) with p(z) = z (1 + z^(k-2)) + 1/(mu z), a rational map of degree k."""
    num = np.zeros(k + 1, complex)
    num[0] = 1.0 / mu
    num[2] += 1
    num[k] += 1
    return RationalMap(num, [0, 1])


def _abs_z(x):
    x = np.atleast_2d(x)
    rho = np.hypot(x[:, 0], x[:, 1])
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(x[:, 2] >= 0, rho / (1 + x[:, 2]), (1 - x[:, 2]) / np.maximum(rho, 1e-300))


def glue_profile(spec: GlueSpec, x):
    """Rotation angle a (1 - s) of the annulus interpolation (a inside, 0 outside)."""
    lz = np.log(np.maximum(_abs_z(x), 1e-300))
    s = (lz - math.log(spec.r_inner)) / (math.log(spec.r_outer) - math.log(spec.r_inner))
    return spec.a * (1 - np.clip(s, 0.0, 1.0))


def _rotate_y(y, theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.column_stack([c * y[:, 0] + s * y[:, 2], y[:, 1], -s * y[:, 0] + c * y[:, 2]])


def glue_function(spec: GlueSpec):
    omega = glue_rational(spec.k, spec.mu)

    def f(x):
        x = np.atleast_2d(np.asarray(x, float))
        return _rotate_y(omega.evaluate(x), glue_profile(spec, x))
    return f


def glue_mesh(level, mu, k=2):
    """Icosphere relabelled by a dilation so that scales 1 and 1/mu are both resolved.

    Points at |z| ~ (c mu)^(-1/2) (the neck between base and bubble) are sent to
    the equator of the underlying icosphere; c = 2 for k = 2 (base pi(2z)).
    """
    c = 2.0 if k == 2 else 1.0
    return build_icosphere(level, gauge=MobiusDilation.from_factor(NORTH, 1.0 / math.sqrt(c * mu)))


def check_glue_resolution(spec: GlueSpec, mesh: SphereMesh, cells=3):
    ang = 2 * math.atan(spec.r_inner)
    h = float(mesh.local_spacing(NORTH)[0])
    if ang < cells * h:
        raise ResolutionError(f"inner radius {ang:.3g} rad spans fewer than {cells} cells of size {h:.3g}")
    return ang / h


def glue(spec: GlueSpec, mesh: SphereMesh) -> DiscreteMap:
    check_glue_resolution(spec, mesh)
    f = glue_function(spec)
    return DiscreteMap(normalize(f(mesh.vertices)), mesh, f)


def glue_defect(spec: GlueSpec, mesh: SphereMesh, v: DiscreteMap | None = None):
    """delta(v_{a,mu}) measured against pi(p) on the same mesh.

    pi(p) is rational of degree k, so its continuum defect is 0; subtracting its
    discrete energy removes the mesh error everywhere outside the annulus.
    """
    v = glue(spec, mesh) if v is None else v
    ref = sample_rational(glue_rational(spec.k, spec.mu), mesh)
    return dirichlet_energy(v) - dirichlet_energy(ref)


def glue_defect_quadrature(spec: GlueSpec, n_r=2000, n_phi=256):
    """Continuum delta by tensor quadrature on the annulus in (log|z|, arg z).

    With v = R_theta omega, |grad v|^2 = |grad omega|^2 + 2 grad theta . <grad omega, e2 x omega>
    + |grad theta|^2 |e2 x omega|^2 and theta depends on |z| only.  In the
    conformal coordinates (t, phi) = (log|z|, arg z) the area element cancels.
    """
    omega = glue_rational(spec.k, spec.mu)
    lo, hi = math.log(spec.r_inner), math.log(spec.r_outer)
    tg, tw = np.polynomial.legendre.leggauss(n_r)
    t = 0.5 * (hi - lo) * tg + 0.5 * (hi + lo)
    wt = 0.5 * (hi - lo) * tw
    phi = np.arange(n_phi) * 2 * np.pi / n_phi
    T, PH = np.meshgrid(t, phi, indexing="ij")
    theta_t = -spec.a / (hi - lo)  # d theta / dt

    def om(tt):
        z = np.exp(tt + 1j * PH)
        from .sphere_geometry import stereo_lift
        return omega.evaluate(stereo_lift(z.ravel())).reshape(z.shape + (3,))

    h = 1e-5
    w0 = om(T)
    wt_d = (om(T + h) - om(T - h)) / (2 * h)
    e2xw = np.stack([w0[..., 2], np.zeros_like(w0[..., 0]), -w0[..., 0]], axis=-1)
    integrand = theta_t * np.sum(wt_d * e2xw, axis=-1) + 0.5 * theta_t ** 2 * np.sum(e2xw ** 2, axis=-1)
    return float(np.sum(wt[:, None] * integrand) * 2 * np.pi / n_phi)


# ---------------------------------------------------------------- rational fitting

def canonical_coefficients(R: RationalMap):
    """Coefficients (P, Q) in north charts with the target rotation absorbed."""
    if R.conjugated:
        raise ValueError("fitting supports holomorphic maps only")
    if not np.allclose(R.domain_pole, NORTH):
        R = R.compose_domain(Mobius.from_rotation(rotation_to(R.domain_pole).T))
    U = Mobius.from_rotation(R.post_rotation @ rotation_to(R.target_pole)).A
    P, Q = R.num, R.den
    return np.concatenate([U[0, 0] * P + U[0, 1] * Q, U[1, 0] * P + U[1, 1] * Q])


def _rational_from(c, n):
    c = c / np.linalg.norm(c)
    P, Q = c[: n + 1], c[n + 1:]
    # drop to the true degree if the top coefficients both vanish numerically
    return RationalMap(P, Q)


def kabsch(src, dst, w):
    """Rotation Q minimizing sum w |Q src - dst|^2."""
    H = (src * w[:, None]).T @ dst
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    return Vt.T @ D @ U.T


class _Objective:
    """Residual vector for the weighted (dist_omega) or H^1 distance."""

    def __init__(self, mesh: SphereMesh, target, n, kind, region=None, weight=None):
        self.mesh, self.target, self.n, self.kind = mesh, target, n, kind
        self.weight = weight
        self.mono, self.d0, self.d1 = self._stencils(mesh.vertices, n)
        # face centroids: a second, staggered lumping of the density mass
        self.cmono, self.cd0, self.cd1 = self._stencils(mesh.face_centroid, n)
        self.cmass = mesh.face_solid_angle
        self.mass = mesh.vertex_weight if region is None else mesh.vertex_weight * region
        self.total = float(np.sum(self.mass)) / (4 * np.pi)
        self.face_mask = np.ones(mesh.n_faces) if region is None else region[mesh.faces].min(axis=1)

    @staticmethod
    def _stencils(x, n):
        Z = to_homogeneous(x)
        j = np.arange(n + 1)
        Z0, Z1 = Z[:, 0:1], Z[:, 1:2]
        mono = Z0 ** j * Z1 ** (n - j)
        with np.errstate(divide="ignore", invalid="ignore"):
            d0 = np.where(j > 0, j * Z0 ** np.maximum(j - 1, 0) * Z1 ** (n - j), 0)
            d1 = np.where(j < n, (n - j) * Z0 ** j * Z1 ** np.maximum(n - j - 1, 0), 0)
        return mono, d0, d1

    @staticmethod
    def _density(c, n, mono, d0, d1):
        P, Q = mono @ c[: n + 1], mono @ c[n + 1:]
        J = (d0 @ c[: n + 1]) * (d1 @ c[n + 1:]) - (d1 @ c[: n + 1]) * (d0 @ c[n + 1:])
        return 2 * (np.abs(J) / (n * (np.abs(P) ** 2 + np.abs(Q) ** 2))) ** 2

    def eval_map(self, c):
        n = self.n
        c = c / np.linalg.norm(c)
        P = self.mono @ c[: n + 1]
        Q = self.mono @ c[n + 1:]
        pq = P * np.conj(Q)
        n2 = np.abs(P) ** 2 + np.abs(Q) ** 2
        w = np.column_stack([2 * pq.real, 2 * pq.imag, np.abs(Q) ** 2 - np.abs(P) ** 2]) / n2[:, None]
        if self.kind != "weighted_by_omega" or self.weight is not None:
            return w, None
        J = (self.d0 @ c[: n + 1]) * (self.d1 @ c[n + 1:]) - (self.d1 @ c[: n + 1]) * (self.d0 @ c[n + 1:])
        dens = 2 * (np.abs(J) / (n * n2)) ** 2
        return w, dens

    def residual_c(self, c):
        w, dens = self.eval_map(c)
        if self.kind == "weighted_by_omega" and self.weight is not None:
            return (np.sqrt(self.mass * self.weight)[:, None] * (w - self.target)).ravel()
        if self.kind == "weighted_by_omega":
            # a bubble narrower than a cell hides its density between vertices
            # or piles it onto one vertex; then the vertex and the face-centroid
            # lumpings of the density mass cannot both be close to 8 pi n
            miss = 0.0
            if self.total > 0.999:
                cn = c / np.linalg.norm(c)
                dc = self._density(cn, self.n, self.cmono, self.cd0, self.cd1)
                for q in (np.sum(self.mass * dens), np.sum(self.cmass * dc)):
                    q = float(q) / (8 * np.pi * self.n)
                    miss += max(0.0, 0.9 - q) + max(0.0, math.log(max(q, 1e-300) / 1.1))
            return np.append((np.sqrt(self.mass * dens)[:, None] * (w - self.target)).ravel(), 10 * miss)
        fr = self.mesh.face_frame
        F = self.mesh.faces
        D = w - self.target
        A = (D[F[:, 1]] - D[F[:, 0]]) / fr["p1"][:, None]
        B = (D[F[:, 2]] - D[F[:, 0]] - fr["q1"][:, None] * A) / fr["q2"][:, None]
        s = np.sqrt(fr["area"] * self.face_mask)[:, None]
        return np.concatenate([(s * A).ravel(), (s * B).ravel()])

    def residual(self, theta):
        m = len(theta) // 2
        c = theta[:m] + 1j * theta[m:]
        r = self.residual_c(c)
        return np.append(r, 1e-3 * (np.dot(theta, theta) - 1.0))

    def value(self, c):
        r = self.residual_c(c)
        return float(np.dot(r, r))


@dataclass
class FitResult:
    best: RationalMap
    dist_w: float
    dist_h1: float
    starts_used: int
    converged: bool
    seed_values: list = field(default_factory=list)
    objective: float = float("nan")


def _valid(c, n):
    try:
        _rational_from(c, n)
        return True
    except HmflowError:
        return False


def _pad(c, n):
    m = len(c) // 2
    P, Q = c[:m], c[m:]
    out = np.zeros(2 * (n + 1), complex)
    out[: len(P)] = P
    out[n + 1: n + 1 + len(Q)] = Q
    return out


def default_seeds(v: DiscreteMap, n, balls=(), extra=(), rng=None, count=16):
    """Seed maps for the multistart fit, each aligned to v by a weighted Kabsch rotation."""
    rng = np.random.default_rng(0) if rng is None else rng
    seeds = list(extra)
    seeds.append(RationalMap.power(n))
    if n >= 2:
        seeds.append(sigma0(n + 1))
        seeds.append(RationalMap([1] + [0] * (n - 1) + [1], [0, 1]))  # z^(n-1) + 1/z type
    for b in balls:
        D = RationalMap.from_mobius(MobiusDilation(b.center, min(b.radius, np.pi / 2)).mobius)
        if n == 1:
            seeds.append(D)
        else:
            seeds.append(RationalMap(np.convolve(D.num, [0] * (n - 1) + [1]), np.convolve(D.den, [1])))
    while len(seeds) < count:
        c = rng.normal(size=2 * (n + 1)) + 1j * rng.normal(size=2 * (n + 1))
        try:
            seeds.append(RationalMap(c[: n + 1], c[n + 1:]))
        except Exception:
            continue
    out = []
    w = v.mesh.vertex_weight
    for s in seeds:
        try:
            vals = s.evaluate(v.mesh.vertices)
            Q = kabsch(vals, v.values, w)
            out.append(s.with_rotation(Q))
            out.append(s)
        except Exception:
            continue
    return out


def fit_best_rational(v: DiscreteMap, degree_: int, distance="weighted_by_omega", seeds=(), balls=(),
                      rng=None, n_starts=16, coarse_level=5, polish=3, max_nfev=None, region=None,
                      weight=None) -> FitResult:
    """Best rational map of the given degree for one of the two distances.

    Multistart Levenberg-Marquardt (finite-difference Jacobian) on a nested
    coarse sub-mesh, followed by polishing the best starts on the full mesh.
    `region` (vertex mask) restricts both distances to part of the sphere.
    On a region the candidate's own density is a poor weight (it can move its
    energy out of the region), so a fixed vertex `weight` may replace it.
    """
    region = None if region is None else np.asarray(region, float)
    weight = None if weight is None else np.asarray(weight, float)
    if distance not in ("weighted_by_omega", "h1"):
        raise ValueError(f"unknown distance {distance}")
    n = int(degree_)
    if n < 1:
        raise ValueError("degree must be >= 1")
    mesh = v.mesh
    full = _Objective(mesh, v.values, n, distance, region, weight)
    coarse = full
    if mesh.level > coarse_level:
        cm = build_icosphere(coarse_level, gauge=mesh.gauge)
        if np.allclose(cm.vertices, mesh.vertices[: cm.n_vertices], atol=1e-12):
            creg = None if region is None else region[: cm.n_vertices]
            if creg is None or creg.sum() >= 50:
                cw = None if weight is None else weight[: cm.n_vertices]
                coarse = _Objective(cm, v.values[: cm.n_vertices], n, distance, creg, cw)
    all_seeds = default_seeds(v, n, balls, seeds, rng, n_starts)
    cs = []
    for s in all_seeds:
        c = canonical_coefficients(s)
        if s.degree != n:
            c = _pad(c, n) if s.degree < n else None
        if c is None:
            continue
        cs.append(c / np.linalg.norm(c))
    if len(cs) < 1:
        raise FitFailure("no usable seeds")
    seed_values = [full.value(c) for c in cs]
    runs = []
    nfev = max_nfev or 60 * (4 * n + 4)
    for c in cs:
        th = np.concatenate([c.real, c.imag])
        try:
            r = least_squares(coarse.residual, th, method="lm", max_nfev=nfev, xtol=1e-10, ftol=1e-12)
            m = len(r.x) // 2
            cc = r.x[:m] + 1j * r.x[m:]
            runs.append((coarse.value(cc), cc))
        except Exception:
            continue
    if not runs:
        raise FitFailure("all multistart runs failed")
    runs.sort(key=lambda t: t[0])
    best_val, best_c, conv = np.inf, None, False
    for _, cc in runs[:polish]:
        th = np.concatenate([cc.real, cc.imag]) / np.linalg.norm(cc)
        r = least_squares(full.residual, th, method="lm", max_nfev=nfev, xtol=1e-10, ftol=1e-12)
        m = len(r.x) // 2
        c2 = r.x[:m] + 1j * r.x[m:]
        val = full.value(c2)
        if val < best_val and _valid(c2, n):
            best_val, best_c, conv = val, c2, r.status > 0
    for i0 in np.argsort(seed_values):
        if seed_values[i0] >= best_val:
            break
        if _valid(cs[i0], n):
            best_val, best_c = seed_values[i0], cs[i0]
            break
    if best_c is None:
        raise FitFailure("every candidate degenerated to a lower degree")
    best = _rational_from(best_c, n)
    samp = sample_rational(best, mesh)
    reg = None if region is None else np.flatnonzero(region > 0)
    dw = weighted_l2_distance(samp, v, best.density if weight is None else weight, reg)
    dh = h1_distance(samp, v, reg)
    return FitResult(best, dw, dh, len(cs), conv, [float(s) for s in seed_values], best_val)


# ---------------------------------------------------------------- sweep

SWEEP_HEADER = None


def sweep_header(k):
    return ["mu", "a", "defect", "xi2"] + [f"dist2_deg{j}" for j in range(1, k + 1)] + [
        "dist2_partition", "ratio_lower", "ratio_upper"]


def sweep_point(mu, k, level, config=None, rng=None, decompose=True):
    """All sweep quantities for one mu (a = 1/mu)."""
    from .decomposition import bubble_decompose, verify_key_properties
    from .harness import RunConfig
    config = config or RunConfig()
    rng = np.random.default_rng(config.seed) if rng is None else rng
    a = 1.0 / mu
    spec = GlueSpec(k, mu, a, config.d_exp, config.a_max)
    mesh = glue_mesh(level, mu, k)
    v = glue(spec, mesh)
    ref = sample_rational(glue_rational(k, mu), mesh)
    delta = dirichlet_energy(v) - dirichlet_energy(ref)
    xi2 = xi_of(delta) ** 2
    row = {"mu": float(mu), "a": a, "defect": delta, "xi2": xi2}
    base = sigma0(k)
    bubble_mu = RationalMap([1], [0, mu])
    seeds_k = [glue_rational(k, mu), glue_rational(k, mu).with_rotation(rotation_about_y(a)),
               glue_rational(k, mu).with_rotation(rotation_about_y(a / 2))]
    fits = {}
    for j in range(1, k + 1):
        extra = seeds_k if j == k else [base, bubble_mu, bubble_mu.with_rotation(rotation_about_y(a))]
        if j < k - 1:
            extra = [RationalMap.power(j)]
        fit = fit_best_rational(v, j, "weighted_by_omega", seeds=extra, rng=rng, n_starts=config.fit_starts)
        fits[j] = fit
        row[f"dist2_deg{j}"] = fit.dist_w ** 2
    lower = min(row[f"dist2_deg{j}"] for j in range(1, k + 1))
    scale = delta * (1 + abs(math.log(delta)))
    report = None
    if decompose:
        dec = bubble_decompose(v, config, defect=delta, reference=ref)
        report = verify_key_properties(dec, v)
        row["dist2_partition"] = sum(c["k3_dist2"] for c in report["components"])
    else:
        row["dist2_partition"] = float("nan")
    row["ratio_lower"] = lower / scale
    row["ratio_upper"] = row["dist2_partition"] / scale
    return row, {"fits": fits, "report": report, "v": v, "mesh": mesh}


def sharpness_sweep(mu_list, k, level, config=None, workers=1, decompose=True):
    """Rows in mu order; points run in parallel when workers > 1 (results identical)."""
    mu_list = list(mu_list)
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as ex:
            futs = [ex.submit(_sweep_row, mu, k, level, config, decompose) for mu in mu_list]
            return [f.result() for f in futs]
    return [_sweep_row(mu, k, level, config, decompose) for mu in mu_list]


def _sweep_row(mu, k, level, config, decompose):
    from .harness import RunConfig
    config = config or RunConfig()
    rng = np.random.default_rng([config.seed, int(mu)])
    return sweep_point(mu, k, level, config, rng, decompose)[0]
