"""Discrete and rational maps S^2 -> S^2: energies, degree, splitting, distances."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegreeAmbiguousError, InvariantError, MeshMismatchError
from .sphere_geometry import (NORTH, Mobius, SphereMesh, from_homogeneous, normalize,
                              rho_ball, rotation_to, solid_angles, to_homogeneous)

FOUR_PI = 4 * np.pi


@dataclass(frozen=True, eq=False)
class DiscreteMap:
    """Unit vectors at the vertices of a mesh.

    `source`, when present, evaluates the underlying continuous map at
    arbitrary points; it is used for exact resampling under gauge changes.
    """

    values: np.ndarray
    mesh: SphereMesh
    source: object = field(default=None, repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.mesh.n_vertices, 3):
            raise MeshMismatchError(f"{len(v)} values for {self.mesh.n_vertices} vertices")
        if np.max(np.abs(np.einsum("ij,ij->i", v, v) - 1.0)) > 2e-10:
            raise InvariantError("map values must be unit vectors")
        object.__setattr__(self, "values", v)

    @classmethod
    def from_function(cls, f, mesh):
        return cls(normalize(f(mesh.vertices)), mesh, f)

    @classmethod
    def identity(cls, mesh):
        return cls(mesh.vertices.copy(), mesh, lambda x: np.asarray(x, float))

    def with_values(self, values):
        return DiscreteMap(values, self.mesh)


def _same_mesh(u, v):
    u.mesh.check_same(v.mesh)


# ---------------------------------------------------------------- per-face calculus

def face_gradients(u: DiscreteMap):
    """Tangential derivatives (d1 u, d2 u) per face in the frame (e1, e2)."""
    fr = u.mesh.face_frame
    F = u.mesh.faces
    U = u.values
    db = U[F[:, 1]] - U[F[:, 0]]
    dc = U[F[:, 2]] - U[F[:, 0]]
    A = db / fr["p1"][:, None]
    B = (dc - fr["q1"][:, None] * A) / fr["q2"][:, None]
    return A, B


def face_energies(u: DiscreteMap):
    """Half the integral of |grad u|^2 over each flat face."""
    A, B = face_gradients(u)
    return 0.5 * u.mesh.face_area * (np.einsum("ij,ij->i", A, A) + np.einsum("ij,ij->i", B, B))


def _region_faces(mesh, region):
    if region is None:
        return None
    mask = np.zeros(mesh.n_vertices, bool)
    mask[np.asarray(region)] = True
    return mask[mesh.faces].all(axis=1)


def dirichlet_energy(u: DiscreteMap, region=None):
    e = face_energies(u)
    sel = _region_faces(u.mesh, region)
    return float(e.sum() if sel is None else e[sel].sum())


def face_split(u: DiscreteMap):
    """Per-face holomorphic and antiholomorphic energies (|u_z|^2, |u_zbar|^2 times area).

    Derivatives are split into parts tangent and normal to the face value
    n = normalize(mean of corner values); the tangent parts use the complex
    structure J w = n x w of the target, and the (small) normal parts are
    shared equally so that the two halves sum to the Dirichlet energy exactly.
    """
    A, B = face_gradients(u)
    F = u.mesh.faces
    n = normalize(u.values[F].sum(axis=1))
    an = np.einsum("ij,ij->i", A, n)
    bn = np.einsum("ij,ij->i", B, n)
    At = A - an[:, None] * n
    Bt = B - bn[:, None] * n
    JB = np.cross(n, Bt)
    normal = 0.25 * (an ** 2 + bn ** 2)
    area = u.mesh.face_area
    holo = area * (0.25 * np.sum((At - JB) ** 2, axis=1) + normal)
    anti = area * (0.25 * np.sum((At + JB) ** 2, axis=1) + normal)
    return holo, anti


def energy_split(u: DiscreteMap):
    h, a = face_split(u)
    return float(h.sum()), float(a.sum())


def raw_degree(u: DiscreteMap):
    F = u.mesh.faces
    U = u.values
    return float(np.sum(solid_angles(U[F[:, 0]], U[F[:, 1]], U[F[:, 2]])) / FOUR_PI)


def degree(u: DiscreteMap, tol=0.1):
    raw = raw_degree(u)
    k = int(round(raw))
    if abs(raw - k) > tol:
        raise DegreeAmbiguousError(raw)
    return k


def xi_of(delta):
    """xi = delta^(1/2) max(|log delta|, 1)^(1/2), and 0 for delta <= 0."""
    if delta <= 0:
        return 0.0
    return math.sqrt(delta * max(abs(math.log(delta)), 1.0))


@dataclass(frozen=True)
class EnergyReport:
    total_energy: float
    holo_energy: float
    antiholo_energy: float
    degree: int
    raw_degree: float
    defect: float
    xi: float
    raw_defect: float
    clamped: bool = False
    below_tolerance: bool = False

    @property
    def E(self):
        return self.total_energy

    def to_dict(self):
        return dict(self.__dict__)


def defect_value(u: DiscreteMap, reference: DiscreteMap | None = None, E=None, k=None):
    """E(u) - 4 pi |deg u|, optionally with discretization error cancelled.

    With a `reference` map of known (harmonic) type on the same mesh, the
    estimate is E_h(u) - E_h(ref) + 4 pi (|deg ref| - ...) i.e. the mesh error of
    the reference energy is subtracted.  Use a reference that agrees with u
    wherever u is already harmonic.
    """
    E = dirichlet_energy(u) if E is None else E
    k = degree(u) if k is None else k
    if reference is None:
        return E - FOUR_PI * abs(k)
    _same_mesh(u, reference)
    kr = degree(reference)
    return E - dirichlet_energy(reference) + FOUR_PI * (abs(kr) - abs(k))


def energy_report(u: DiscreteMap, reference: DiscreteMap | None = None, tol=None) -> EnergyReport:
    h, a = energy_split(u)
    E = dirichlet_energy(u)
    raw = raw_degree(u)
    k = int(round(raw))
    if abs(raw - k) > 0.1:
        raise DegreeAmbiguousError(raw)
    d = defect_value(u, reference, E, k)
    tol = 0.02 * E if tol is None else tol
    below = d < -tol
    if below:
        warnings.warn(f"defect {d:.3e} below discretization tolerance {-tol:.3e}", RuntimeWarning)
    dc = max(d, 0.0)
    return EnergyReport(E, h, a, k, raw, dc, xi_of(dc), d, d < 0, below)


# ---------------------------------------------------------------- rational maps

def _trim(c):
    c = np.atleast_1d(np.asarray(c, dtype=complex))
    nz = np.flatnonzero(np.abs(c) > 0)
    return c[: nz[-1] + 1] if len(nz) else c[:1] * 0


def _chordal(a, b):
    a = np.asarray(a)[:, None]
    b = np.asarray(b)[None, :]
    return 2 * np.abs(a - b) / np.sqrt((1 + np.abs(a) ** 2) * (1 + np.abs(b) ** 2))


@dataclass(frozen=True, eq=False)
class RationalMap:
    """w = P(z)/Q(z) (or P(zbar)/Q(zbar)) between stereographic charts.

    Coefficients are listed from the constant term upwards.  The degree is
    max(deg P, deg Q); evaluation uses the homogeneous forms of that degree.
    """

    num: np.ndarray
    den: np.ndarray
    conjugated: bool = False
    post_rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    domain_pole: np.ndarray = field(default_factory=lambda: NORTH.copy())
    target_pole: np.ndarray = field(default_factory=lambda: NORTH.copy())

    def __post_init__(self):
        num, den = _trim(self.num), _trim(self.den)
        if not np.any(num) and not np.any(den):
            raise InvariantError("numerator and denominator both vanish")
        n = max(len(num), len(den)) - 1
        P = np.zeros(n + 1, complex)
        Q = np.zeros(n + 1, complex)
        P[: len(num)] = num
        Q[: len(den)] = den
        object.__setattr__(self, "num", P)
        object.__setattr__(self, "den", Q)
        object.__setattr__(self, "post_rotation", np.asarray(self.post_rotation, float))
        object.__setattr__(self, "domain_pole", normalize(np.asarray(self.domain_pole, float)))
        object.__setattr__(self, "target_pole", normalize(np.asarray(self.target_pole, float)))
        self._check_roots()

    @property
    def degree(self):
        return len(self.num) - 1

    def _roots(self, c):
        c = _trim(c)
        finite = np.roots(c[::-1]) if len(c) > 1 and np.any(c) else np.zeros(0, complex)
        n_inf = self.degree - (len(c) - 1)
        return finite, n_inf

    def _check_roots(self):
        if self.degree == 0:
            return
        if not np.any(self.num) or not np.any(self.den):
            return
        pf, pi = self._roots(self.num)
        qf, qi = self._roots(self.den)
        if pi > 0 and qi > 0:
            raise InvariantError("common root at infinity")
        if len(pf) and len(qf) and np.min(_chordal(pf, qf)) < 1e-8:
            raise InvariantError("numerator and denominator share a root")

    # homogeneous forms P(Z0, Z1) = sum_j p_j Z0^j Z1^(n-j)
    def _forms(self, Z, derivatives=False):
        n = self.degree
        Z0, Z1 = Z[:, 0], Z[:, 1]
        j = np.arange(n + 1)
        pw0 = Z0[:, None] ** j
        pw1 = Z1[:, None] ** (n - j)
        mono = pw0 * pw1
        P = mono @ self.num
        Q = mono @ self.den
        if not derivatives:
            return P, Q
        if n == 0:
            z = np.zeros_like(P)
            return P, Q, z, z, z, z
        with np.errstate(divide="ignore", invalid="ignore"):
            d0 = np.where(j > 0, j * Z0[:, None] ** np.maximum(j - 1, 0) * pw1, 0)
            d1 = np.where(j < n, (n - j) * pw0 * Z1[:, None] ** np.maximum(n - j - 1, 0), 0)
        return P, Q, d0 @ self.num, d1 @ self.num, d0 @ self.den, d1 @ self.den

    def _domain_coords(self, x):
        x = np.atleast_2d(np.asarray(x, float))
        xl = x @ rotation_to(self.domain_pole)
        Z = to_homogeneous(xl)
        return np.conj(Z) if self.conjugated else Z

    def evaluate(self, x):
        x = np.asarray(x, float)
        single = x.ndim == 1
        P, Q = self._forms(self._domain_coords(x))
        y = from_homogeneous(P, Q) @ (self.post_rotation @ rotation_to(self.target_pole)).T
        return y[0] if single else y

    __call__ = evaluate

    def density(self, x):
        """|grad omega|^2 = 2 (w^#)^2 with w^# the spherical derivative."""
        x = np.asarray(x, float)
        single = x.ndim == 1
        n = self.degree
        Z = self._domain_coords(x)
        if n == 0:
            out = np.zeros(len(Z))
        else:
            P, Q, P0, P1, Q0, Q1 = self._forms(Z, derivatives=True)
            J = P0 * Q1 - P1 * Q0
            ws = np.abs(J) / (n * (np.abs(P) ** 2 + np.abs(Q) ** 2))  # |Z| = 1
            out = 2 * ws ** 2
        return out[0] if single else out

    # constructors
    @classmethod
    def from_mobius(cls, A: Mobius):
        a, b, c, d = A.A.ravel()
        return cls([b, a], [d, c])

    @classmethod
    def identity(cls):
        return cls([0, 1], [1])

    @classmethod
    def power(cls, k):
        return cls([0] * k + [1], [1])

    @classmethod
    def constant(cls, y):
        """Constant map with value y."""
        R = rotation_to(y)
        return cls([0], [1], post_rotation=R)

    def compose_domain(self, A: Mobius) -> "RationalMap":
        """omega o A for a Mobius map A of the domain (domain pole must be north)."""
        a, b, c, d = A.A.ravel()
        n = self.degree
        lin0 = np.array([b, a])  # a z + b
        lin1 = np.array([d, c])
        Pn = np.zeros(n + 1, complex)
        Qn = np.zeros(n + 1, complex)
        for j in range(n + 1):
            t = np.array([1.0 + 0j])
            for _ in range(j):
                t = np.convolve(t, lin0)
            for _ in range(n - j):
                t = np.convolve(t, lin1)
            Pn += self.num[j] * t
            Qn += self.den[j] * t
        return RationalMap(Pn, Qn, self.conjugated, self.post_rotation, self.domain_pole, self.target_pole)

    def with_rotation(self, R):
        return RationalMap(self.num, self.den, self.conjugated, np.asarray(R) @ self.post_rotation,
                           self.domain_pole, self.target_pole)

    def to_dict(self):
        return {"num": [[float(c.real), float(c.imag)] for c in self.num],
                "den": [[float(c.real), float(c.imag)] for c in self.den],
                "conjugated": bool(self.conjugated),
                "rotation": [float(t) for t in self.post_rotation.ravel()],
                "poles": {"domain": [float(t) for t in self.domain_pole],
                          "target": [float(t) for t in self.target_pole]}}

    @classmethod
    def from_dict(cls, d):
        num = [complex(re, im) for re, im in d["num"]]
        den = [complex(re, im) for re, im in d["den"]]
        poles = d.get("poles", {})
        return cls(num, den, bool(d.get("conjugated", False)),
                   np.asarray(d.get("rotation", np.eye(3).ravel()), float).reshape(3, 3),
                   np.asarray(poles.get("domain", NORTH), float), np.asarray(poles.get("target", NORTH), float))


def rational_eval(R: RationalMap, x):
    return R.evaluate(x)


def rational_density(R: RationalMap, x):
    return R.density(x)


def sample_rational(R: RationalMap, mesh: SphereMesh) -> DiscreteMap:
    return DiscreteMap(normalize(R.evaluate(mesh.vertices)), mesh, R.evaluate)


# ---------------------------------------------------------------- distances

def _weights(weight, mesh):
    if weight is None:
        return np.ones(mesh.n_vertices)
    if callable(weight):
        return np.asarray(weight(mesh.vertices), float)
    w = np.asarray(weight, float)
    return np.full(mesh.n_vertices, float(w)) if w.ndim == 0 else w


def weighted_l2_distance(u: DiscreteMap, v: DiscreteMap, weight=None, region=None):
    """sqrt( sum_vertices weight |u - v|^2 vertex_weight ), optionally over a vertex subset."""
    _same_mesh(u, v)
    w = _weights(weight, u.mesh) * u.mesh.vertex_weight
    d2 = np.sum((u.values - v.values) ** 2, axis=1)
    if region is not None:
        mask = np.zeros(len(w), bool)
        mask[np.asarray(region)] = True
        w = np.where(mask, w, 0.0)
    return float(np.sqrt(np.sum(w * d2)))


def h1_distance(u: DiscreteMap, v: DiscreteMap, region=None):
    """Integral of |grad (u - v)|^2 over the faces of `region` (R^3 valued difference)."""
    _same_mesh(u, v)
    fr = u.mesh.face_frame
    F = u.mesh.faces
    D = u.values - v.values
    A = (D[F[:, 1]] - D[F[:, 0]]) / fr["p1"][:, None]
    B = (D[F[:, 2]] - D[F[:, 0]] - fr["q1"][:, None] * A) / fr["q2"][:, None]
    e = fr["area"] * (np.sum(A * A, axis=1) + np.sum(B * B, axis=1))
    sel = _region_faces(u.mesh, region)
    return float(e.sum() if sel is None else e[sel].sum())


def oscillation(u: DiscreteMap, region=None):
    """Diameter of the image of a vertex set.

    For unit vectors |x - y| is largest where y is nearest to -x, so one
    nearest-neighbour query per point gives the exact diameter.
    """
    vals = u.values if region is None else u.values[np.asarray(region)]
    return values_oscillation(vals)


def values_oscillation(vals):
    vals = np.asarray(vals, float)
    if len(vals) == 0:
        raise ValueError("oscillation of an empty region")
    if len(vals) <= 4096:
        g = vals @ vals.T
        return float(np.sqrt(max(0.0, 2 - 2 * g.min())))
    _, j = cKDTree(vals).query(-vals, k=1)
    return float(np.max(np.linalg.norm(vals - vals[j], axis=1)))


# ---------------------------------------------------------------- density bound diagnostic

def check_density_bound(R: RationalMap, balls1, balls2=(), eps1=0.5, d=0.25, mesh=None, k=None):
    """Hypotheses and conclusion of the pointwise density bound for rational maps.

    Returns a dict with booleans for the three hypotheses and the fitted
    constants C = sup |grad h|^2 / sum rho^2 and ratio = C / 2 (so that the
    identity map with a hemisphere gives ratio 1).
    """
    from .sphere_geometry import build_icosphere
    balls1, balls2 = list(balls1), list(balls2)
    if not balls1:
        raise ValueError("balls1 must be nonempty")
    if k is not None and len(balls1) + len(balls2) > k:
        raise ValueError("more balls than the degree bound")
    mesh = build_icosphere(5) if mesh is None else mesh
    x = mesh.face_centroid
    e = 0.5 * R.density(x) * mesh.face_solid_angle
    tree = cKDTree(x)
    allb = balls1 + balls2

    def energy_in(mask):
        return float(e[mask].sum())

    outside = np.ones(len(x), bool)
    for b in allb:
        outside &= ~b.contains(x)
    hyp1 = energy_in(outside) <= 2 * eps1
    hyp3 = all(energy_in(b.scaled(2).contains(x) & ~b.contains(x)) <= 2 * eps1 for b in balls2)
    in_j2 = np.zeros(len(x), bool)
    for b in balls2:
        in_j2 |= b.contains(x)
    hyp2 = True
    pts = mesh.vertices
    near = np.zeros(len(pts), bool)
    for b in balls1:
        near |= b.scaled(4).contains(pts)
    for p in pts[near]:
        ok = False
        for b in balls1:
            if b.distance(p)[0] < b.radius / d:
                idx = tree.query_ball_point(p, 2 * np.sin(min(d * b.radius, np.pi) / 2))
                m = np.zeros(len(x), bool)
                m[idx] = True
                if energy_in(m & ~in_j2) <= 2 * eps1:
                    ok = True
                    break
        if not ok:
            hyp2 = False
            break
    excl = np.zeros(len(pts), bool)
    for b in balls2:
        excl |= b.scaled(4).contains(pts)
    sel = pts[~excl]
    rho2 = sum(rho_ball(b, sel) ** 2 for b in allb)
    C = float(np.max(R.density(sel) / rho2)) if len(sel) else 0.0
    return {"hyp_outside_energy": bool(hyp1), "hyp_local_energy": bool(hyp2), "hyp_annuli": bool(hyp3),
            "fitted_C": C, "ratio": C / 2}
