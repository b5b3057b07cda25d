"""Sphere meshes, stereographic charts, Mobius maps and conformal weights.

Points of S^2 are handled in homogeneous coordinates [Z0 : Z1] of the
Riemann sphere, with z = Z0/Z1 = (x1 + i x2)/(1 + x3).  The north pole
(0, 0, 1) is z = 0 and the south pole is z = infinity.  Working with pairs
(Z0, Z1) avoids overflow near the pole of any chart.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import InvalidMetricError, MeshMismatchError, ResourceLimitError, CorruptFileError

NORTH = np.array([0.0, 0.0, 1.0])
MAX_LEVEL = 8


def _as_points(x):
    x = np.asarray(x, dtype=float)
    return x.reshape(-1, 3), x.ndim == 1


def normalize(v, axis=-1):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=axis, keepdims=True)


# ---------------------------------------------------------------- charts

def to_homogeneous(x):
    """Unit vectors (N, 3) -> complex array (N, 2) of unit norm."""
    x, _ = _as_points(x)
    Z = np.empty((len(x), 2), dtype=complex)
    up = x[:, 2] >= 0
    Z[up, 0] = x[up, 0] + 1j * x[up, 1]
    Z[up, 1] = 1.0 + x[up, 2]
    dn = ~up
    Z[dn, 0] = 1.0 - x[dn, 2]
    Z[dn, 1] = x[dn, 0] - 1j * x[dn, 1]
    return Z / np.linalg.norm(Z, axis=1, keepdims=True)


def from_homogeneous(P, Q):
    """Lift [P : Q] to the unit sphere (inverse stereographic projection)."""
    P = np.asarray(P, dtype=complex)
    Q = np.asarray(Q, dtype=complex)
    s = np.maximum(np.abs(P), np.abs(Q))
    s = np.where(s > 0, s, 1.0)
    P = P / s
    Q = Q / s
    pq = P * np.conj(Q)
    n2 = np.abs(P) ** 2 + np.abs(Q) ** 2
    out = np.stack([2 * pq.real, 2 * pq.imag, np.abs(Q) ** 2 - np.abs(P) ** 2], axis=-1)
    return out / n2[..., None]


def rotation_to(pole):
    """Rotation matrix taking the north pole to `pole` (canonical choice)."""
    p = normalize(np.asarray(pole, dtype=float))
    c = p[2]
    if c > 1 - 1e-15:
        return np.eye(3)
    if c < -1 + 1e-15:
        return np.diag([1.0, -1.0, -1.0])
    axis = np.array([-p[1], p[0], 0.0])
    s = np.linalg.norm(axis)
    k = axis / s
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + s * K + (1 - c) * (K @ K)


def rotation_about_y(a):
    """Rotation by angle a about the y2 axis (takes (0,0,1) to (sin a, 0, cos a))."""
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def stereo_lift(z, pole=NORTH):
    """pi_pole(z); z may be complex, an array, or infinite."""
    z = np.asarray(z, dtype=complex)
    inf = ~np.isfinite(z)
    P = np.where(inf, 1.0, z)
    Q = np.where(inf, 0.0, 1.0)
    y = from_homogeneous(P, Q)
    return y @ rotation_to(pole).T


def stereo_project(y, pole=NORTH):
    """Inverse of stereo_lift; -pole maps to complex infinity."""
    y = np.asarray(y, dtype=float)
    yl = y @ rotation_to(pole)
    den = 1.0 + yl[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        # the quotient (1 - y3)/(y1 - i y2) is the accurate form in the south
        zs = (yl[..., 0] + 1j * yl[..., 1]) / den
        zn = (1.0 - yl[..., 2]) / (yl[..., 0] - 1j * yl[..., 1])
    z = np.where(yl[..., 2] >= 0, zs, zn)
    z = np.where(den <= 1e-300, complex(np.inf, 0), z)
    return z[()] if z.ndim == 0 else z


# ---------------------------------------------------------------- Mobius maps

def _mobius_through(src, dst):
    """Matrix of the Mobius map sending three homogeneous points src to dst."""
    def frame(P):
        # columns l1*P1, l2*P2 with l1*P1 + l2*P2 = P3
        A = np.column_stack([P[0], P[1]])
        lam = np.linalg.solve(A, P[2])
        return A * lam
    return frame(dst) @ np.linalg.inv(frame(src))


class Mobius:
    """Orientation preserving conformal automorphism of S^2 as an SL(2,C) matrix."""

    __slots__ = ("A",)

    def __init__(self, A):
        A = np.asarray(A, dtype=complex)
        A = A / np.sqrt(np.linalg.det(A))
        object.__setattr__(self, "A", A)

    def __setattr__(self, name, value):
        raise AttributeError("Mobius is immutable")

    @classmethod
    def identity(cls):
        return cls(np.eye(2))

    @classmethod
    def from_rotation(cls, R):
        pts = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
        src = to_homogeneous(pts)
        dst = to_homogeneous(pts @ np.asarray(R).T)
        return cls(_mobius_through(src, dst))

    @classmethod
    def dilation(cls, center, mu):
        U = cls.from_rotation(rotation_to(center)).A
        s = np.sqrt(mu)
        return cls(U @ np.diag([s, 1.0 / s]) @ np.linalg.inv(U))

    def __matmul__(self, other):
        return Mobius(self.A @ other.A)

    def inverse(self):
        return Mobius(np.linalg.inv(self.A))

    def apply(self, x):
        x, single = _as_points(x)
        W = to_homogeneous(x) @ self.A.T
        y = from_homogeneous(W[:, 0], W[:, 1])
        return y[0] if single else y

    def conformal_factor(self, x):
        """rho = |dM| = (1/sqrt 2)|grad M|, exact since det A = 1."""
        x, single = _as_points(x)
        Z = to_homogeneous(x)
        W = Z @ self.A.T
        rho = 1.0 / np.sum(np.abs(W) ** 2, axis=1)
        return rho[0] if single else rho

    def equivalent_dilation(self) -> "MobiusDilation":
        """Dilation with the same conformal factor (M = rotation o dilation)."""
        U, s, Vh = np.linalg.svd(self.A)
        mu = s[0] / s[1]
        V = Vh.conj().T
        # rho_A(x) = rho_S(V^H x) with S = diag(s0, s1); S expands about z = 0,
        # whose preimage is the second column of V
        center = from_homogeneous(V[0, 1], V[1, 1])
        return MobiusDilation.from_factor(center, mu)

    def image_of_ball(self, ball: "GeodesicBall") -> "GeodesicBall":
        """Exact image of a spherical cap (Mobius maps send circles to circles)."""
        c = normalize(ball.center)
        R = rotation_to(c)
        ang = np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3])
        r = ball.radius
        ring = np.column_stack([np.sin(r) * np.cos(ang), np.sin(r) * np.sin(ang),
                                np.full(3, np.cos(r))]) @ R.T
        y = self.apply(ring)
        n = np.cross(y[1] - y[0], y[2] - y[0])
        n = n / np.linalg.norm(n)
        d = float(np.clip(n @ y.mean(axis=0), -1.0, 1.0))
        yc = self.apply(c)
        if n @ yc < d:
            n, d = -n, -d
        return GeodesicBall(n, float(np.arccos(d)))


@dataclass(frozen=True, eq=False)
class MobiusDilation:
    """Dilation M_{p,r} scaling the ball B_r(p) up to the hemisphere about p."""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        c = normalize(np.asarray(self.center, dtype=float))
        object.__setattr__(self, "center", c)
        if not (0.0 < self.radius <= np.pi / 2 + 1e-12):
            raise ValueError(f"dilation radius {self.radius} outside (0, pi/2]")
        object.__setattr__(self, "radius", float(min(self.radius, np.pi / 2)))

    @classmethod
    def from_factor(cls, center, mu):
        mu = float(mu)
        if mu < 1.0:
            # contraction about p = dilation about -p
            return cls(-normalize(np.asarray(center, float)), 2 * np.arctan(mu))
        return cls(center, 2 * np.arctan(1.0 / mu))

    @property
    def dilation(self):
        return 1.0 / np.tan(self.radius / 2)

    mu = dilation

    @cached_property
    def mobius(self) -> Mobius:
        return Mobius.dilation(self.center, self.dilation)

    def apply(self, x):
        return self.mobius.apply(x)

    def inverse(self) -> "MobiusDilation":
        return MobiusDilation(-self.center, self.radius)

    def conformal_factor(self, x):
        x, single = _as_points(x)
        mu = self.dilation
        c = np.clip(x @ self.center, -1.0, 1.0)
        rho = 2 * mu / ((1 + c) + mu * mu * (1 - c))
        return rho[0] if single else rho

    def to_dict(self):
        return {"center": [float(t) for t in self.center], "radius": float(self.radius)}


def mobius_apply(M, x):
    return M.apply(x)


def conformal_factor(M, x):
    return M.conformal_factor(x)


@dataclass(frozen=True, eq=False)
class GeodesicBall:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", normalize(np.asarray(self.center, dtype=float)))
        if not self.radius > 0:
            raise ValueError("ball radius must be positive")
        object.__setattr__(self, "radius", float(self.radius))

    def distance(self, x):
        x, _ = _as_points(x)
        return np.arccos(np.clip(x @ self.center, -1.0, 1.0))

    def contains(self, x):
        return self.distance(x) < self.radius

    def scaled(self, factor):
        return GeodesicBall(self.center, min(self.radius * factor, np.pi))

    def to_dict(self):
        return {"center": [float(t) for t in self.center], "radius": float(self.radius)}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["center"], float), float(d["radius"]))


def rho_ball(ball: GeodesicBall, x):
    """Conformal factor of the dilation blowing up `ball`; 1 once radius >= pi/2."""
    if ball.radius >= np.pi / 2:
        return np.ones(len(_as_points(x)[0]))
    return MobiusDilation(ball.center, ball.radius).conformal_factor(x)


@dataclass(frozen=True, eq=False)
class WeightedMetric:
    """Conformal metric scale * (includes_base + sum_i rho_i^2) g_{S^2}."""

    dilations: tuple = ()
    includes_base: bool = True
    scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(self.dilations))
        if not self.dilations and not self.includes_base:
            raise InvalidMetricError("metric without base term needs at least one dilation")
        if not self.scale > 0:
            raise InvalidMetricError("metric scale must be positive")

    def rho2(self, x):
        x, _ = _as_points(x)
        out = np.full(len(x), float(self.includes_base))
        for M in self.dilations:
            out += M.conformal_factor(x) ** 2
        return self.scale * out

    def weighted_area(self, mesh):
        return integrate(mesh, self.rho2)

    def vertex_rho2(self, mesh):
        """Effective rho^2 per vertex: int phi_i rho^2 / int phi_i (consistent lumped mass).

        Point values rho^2(x_i) over- or under-weight vertices when a dilation is
        narrower than a mesh cell; the hat-function integral does not.
        """
        if not self.dilations:
            return np.full(mesh.n_vertices, self.scale * float(self.includes_base))
        h = float(np.max(mesh.edge_length))
        hot = [M.center for M in self.dilations if M.radius < 4 * h]
        return vertex_mass(mesh, self.rho2, hot) / vertex_mass(mesh, lambda x: np.ones(len(x)))

    def scaled(self, s):
        return WeightedMetric(self.dilations, self.includes_base, self.scale * s)

    def pullback(self, G: Mobius) -> "WeightedMetric":
        """G^* g expressed in the original domain (every term becomes a dilation)."""
        terms = [(M.mobius @ G).equivalent_dilation() for M in self.dilations]
        if self.includes_base:
            terms.insert(0, G.equivalent_dilation())
        return WeightedMetric(tuple(terms), False, self.scale)


def weighted_metric(dilations=(), includes_base=True, max_terms=None):
    dilations = tuple(dilations)
    if max_terms is not None and len(dilations) > max_terms:
        raise InvalidMetricError(f"{len(dilations)} dilations exceed degree bound {max_terms}")
    return WeightedMetric(dilations, includes_base)


ROUND = WeightedMetric()


# ---------------------------------------------------------------- meshes

_T = (1 + 5 ** 0.5) / 2
_ICO_V = np.array([(-1, _T, 0), (1, _T, 0), (-1, -_T, 0), (1, -_T, 0), (0, -1, _T), (0, 1, _T),
                   (0, -1, -_T), (0, 1, -_T), (_T, 0, -1), (_T, 0, 1), (-_T, 0, -1), (-_T, 0, 1)],
                  dtype=float)
_ICO_F = np.array([(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
                   (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
                   (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)])


def solid_angles(a, b, c):
    """Signed solid angle of the geodesic triangles (a, b, c), rows of unit vectors."""
    num = np.einsum("ij,ij->i", a, np.cross(b, c))
    den = 1.0 + np.einsum("ij,ij->i", a, b) + np.einsum("ij,ij->i", b, c) + np.einsum("ij,ij->i", c, a)
    return 2.0 * np.arctan2(num, den)


def _subdivide(V, F):
    nv = len(V)
    e = np.stack([F[:, [0, 1]], F[:, [1, 2]], F[:, [2, 0]]], axis=1).reshape(-1, 2)
    es = np.sort(e, axis=1)
    key = es[:, 0].astype(np.int64) * nv + es[:, 1]
    uniq, inv = np.unique(key, return_inverse=True)
    mids = normalize((V[uniq // nv] + V[uniq % nv]) / 2)
    m = (nv + inv).reshape(-1, 3)
    a, b, c = F[:, 0], F[:, 1], F[:, 2]
    mab, mbc, mca = m[:, 0], m[:, 1], m[:, 2]
    F2 = np.concatenate([np.column_stack([a, mab, mca]), np.column_stack([b, mbc, mab]),
                         np.column_stack([c, mca, mbc]), np.column_stack([mab, mbc, mca])])
    return np.vstack([V, mids]), F2


@dataclass(frozen=True, eq=False)
class SphereMesh:
    """Triangulated unit sphere with lumped quadrature and cotangent stencils."""

    vertices: np.ndarray
    faces: np.ndarray
    level: int = -1
    gauge: MobiusDilation | None = field(default=None)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    @cached_property
    def face_corners(self):
        V, F = self.vertices, self.faces
        return V[F[:, 0]], V[F[:, 1]], V[F[:, 2]]

    @cached_property
    def face_solid_angle(self):
        return solid_angles(*self.face_corners)

    @cached_property
    def vertex_weight(self):
        w = np.repeat(self.face_solid_angle / 3.0, 3)
        return np.bincount(self.faces.ravel(), weights=w, minlength=self.n_vertices)

    @cached_property
    def face_frame(self):
        """Per face: flat area, unit normal, e1, e2 and the planar edge coordinates.

        With e1 along b - a and e2 = n x e1, b - a = (p1, 0) and c - a = (q1, q2).
        """
        a, b, c = self.face_corners
        ab, ac = b - a, c - a
        cr = np.cross(ab, ac)
        dbl = np.linalg.norm(cr, axis=1)
        n = cr / dbl[:, None]
        p1 = np.linalg.norm(ab, axis=1)
        e1 = ab / p1[:, None]
        e2 = np.cross(n, e1)
        q1 = np.einsum("ij,ij->i", ac, e1)
        q2 = np.einsum("ij,ij->i", ac, e2)
        return {"area": dbl / 2, "normal": n, "e1": e1, "e2": e2, "p1": p1, "q1": q1, "q2": q2}

    @property
    def face_area(self):
        return self.face_frame["area"]

    @cached_property
    def face_centroid(self):
        a, b, c = self.face_corners
        return normalize(a + b + c)

    @cached_property
    def _cot(self):
        a, b, c = self.face_corners

        def cot(p, q, r):  # angle at p
            u, v = q - p, r - p
            return np.einsum("ij,ij->i", u, v) / np.linalg.norm(np.cross(u, v), axis=1)
        return np.column_stack([cot(a, b, c), cot(b, c, a), cot(c, a, b)])

    @cached_property
    def edges(self):
        F = self.faces
        # edge opposite to corner j of each face
        e = np.stack([F[:, [1, 2]], F[:, [2, 0]], F[:, [0, 1]]], axis=1).reshape(-1, 2)
        es = np.sort(e, axis=1)
        key = es[:, 0].astype(np.int64) * self.n_vertices + es[:, 1]
        uniq, inv = np.unique(key, return_inverse=True)
        w = np.bincount(inv, weights=0.5 * self._cot.ravel())
        E = np.column_stack([uniq // self.n_vertices, uniq % self.n_vertices])
        return E, w

    @property
    def edge_cotan(self):
        return self.edges[1]

    @cached_property
    def laplacian(self):
        """Positive semidefinite stiffness matrix L with u^T L u = 2 E(u) per component."""
        E, w = self.edges
        n = self.n_vertices
        i, j = E[:, 0], E[:, 1]
        L = sp.coo_matrix((np.concatenate([-w, -w]), (np.concatenate([i, j]), np.concatenate([j, i]))),
                          shape=(n, n)).tocsr()
        d = -np.asarray(L.sum(axis=1)).ravel()
        return (L + sp.diags(d)).tocsr()

    @cached_property
    def neighbors(self):
        E, _ = self.edges
        n = self.n_vertices
        A = sp.coo_matrix((np.ones(2 * len(E)), (np.concatenate([E[:, 0], E[:, 1]]),
                                                  np.concatenate([E[:, 1], E[:, 0]]))), shape=(n, n))
        return A.tocsr()

    @cached_property
    def edge_length(self):
        E, _ = self.edges
        return np.linalg.norm(self.vertices[E[:, 0]] - self.vertices[E[:, 1]], axis=1)

    def local_spacing(self, points, k=6):
        """Mean edge length around the vertices nearest to `points`."""
        from scipy.spatial import cKDTree
        _, idx = cKDTree(self.vertices).query(np.atleast_2d(points), k=1)
        E, _ = self.edges
        inc = np.bincount(E.ravel(), weights=np.repeat(self.edge_length, 2), minlength=self.n_vertices)
        deg = np.bincount(E.ravel(), minlength=self.n_vertices)
        return inc[idx] / deg[idx]

    @cached_property
    def digest(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.vertices).tobytes())
        h.update(np.ascontiguousarray(self.faces.astype(np.int64)).tobytes())
        return h.hexdigest()

    def check_same(self, other):
        if other is not self and (other.n_vertices != self.n_vertices or other.digest != self.digest):
            raise MeshMismatchError("maps live on different meshes")


def build_icosphere(level: int, gauge=None) -> SphereMesh:
    """Icosahedron subdivided `level` times and projected to the unit sphere.

    An optional Mobius map `gauge` is applied to the vertices afterwards; this
    relabels the same triangulation conformally so that it is dense where the
    gauge contracts (a "balanced" mesh for two-scale maps).
    """
    level = int(level)
    if level < 0:
        raise ValueError("level must be nonnegative")
    if level > MAX_LEVEL:
        raise ResourceLimitError(f"mesh level {level} exceeds the memory guard {MAX_LEVEL}")
    V = normalize(_ICO_V)
    F = _ICO_F.copy()
    for _ in range(level):
        V, F = _subdivide(V, F)
    if gauge is not None:
        V = normalize(gauge.apply(V))
    return SphereMesh(V, F.astype(np.int64), level, gauge)


def ball_vertices(mesh: SphereMesh, ball: GeodesicBall):
    return np.flatnonzero(ball.contains(mesh.vertices))


# 7-point degree-5 rule on the reference triangle (barycentric, weights sum to 1)
_A1, _B1 = 0.059715871789770, 0.470142064105115
_A2, _B2 = 0.797426985353087, 0.101286507323456
_QB = np.array([[1 / 3, 1 / 3, 1 / 3],
                [_A1, _B1, _B1], [_B1, _A1, _B1], [_B1, _B1, _A1],
                [_A2, _B2, _B2], [_B2, _A2, _B2], [_B2, _B2, _A2]])
_QW = np.array([0.225] + [0.132394152788506] * 3 + [0.125939180544827] * 3)


def quadrature_points(mesh: SphereMesh):
    """Quadrature nodes on S^2 and weights for the radially projected faces."""
    a, b, c = mesh.face_corners
    fr = mesh.face_frame
    pts = (_QB[:, 0, None, None] * a + _QB[:, 1, None, None] * b + _QB[:, 2, None, None] * c)
    r = np.linalg.norm(pts, axis=2)
    jac = np.einsum("qfi,fi->qf", pts, fr["normal"]) / r ** 3
    w = _QW[:, None] * fr["area"][None, :] * jac
    return (pts / r[..., None]).reshape(-1, 3), w.reshape(-1)


def _fine_rule(n):
    """Barycentric centroids of the n^2 subtriangles of a triangle, equal weights."""
    pts = []
    for i in range(n):
        for j in range(n - i):
            pts.append(((i + 1 / 3) / n, (j + 1 / 3) / n))
            if i + j <= n - 2:
                pts.append(((i + 2 / 3) / n, (j + 2 / 3) / n))
    ab = np.array(pts)
    return np.column_stack([ab, 1 - ab.sum(axis=1)])[:, [2, 0, 1]], np.full(len(ab), 1.0 / n ** 2)


def vertex_mass(mesh: SphereMesh, f, hot_centers=(), var_tol=0.25, n_fine=24):
    """int_{S^2} phi_i f for every hat function phi_i (radially projected faces).

    Faces where f varies by more than var_tol across the 7-point nodes, or that
    lie near one of `hot_centers` (features narrower than a cell), use an
    n_fine^2 subtriangle rule instead.
    """
    a, b, c = mesh.face_corners
    n = mesh.normal if hasattr(mesh, "normal") else mesh.face_frame["normal"]
    area = mesh.face_frame["area"]

    def nodes(B, faces):
        pts = B[:, 0, None, None] * a[faces] + B[:, 1, None, None] * b[faces] + B[:, 2, None, None] * c[faces]
        r = np.linalg.norm(pts, axis=2)
        jac = np.einsum("qfi,fi->qf", pts, n[faces]) / r ** 3
        return pts / r[..., None], jac

    allf = np.arange(mesh.n_faces)
    x, jac = nodes(_QB, allf)
    fx = f(x.reshape(-1, 3)).reshape(x.shape[:2])
    fine = fx.max(axis=0) > (1 + var_tol) * fx.min(axis=0)
    if len(hot_centers):
        cen = mesh.face_centroid
        rad = np.max(np.linalg.norm(a - cen, axis=1)) * 3
        for p in hot_centers:
            fine |= np.linalg.norm(cen - np.asarray(p), axis=1) < rad
    out = np.zeros(mesh.n_vertices)
    coarse = ~fine
    w = (_QW[:, None] * area[None, :] * jac * fx)[:, coarse]
    for k in range(3):
        np.add.at(out, mesh.faces[coarse, k], (w * _QB[:, k, None]).sum(axis=0))
    idx = np.flatnonzero(fine)
    if len(idx):
        B, W = _fine_rule(n_fine)
        for chunk in np.array_split(idx, max(1, len(idx) // 256)):
            xf, jf = nodes(B, chunk)
            ff = f(xf.reshape(-1, 3)).reshape(xf.shape[:2])
            wf = W[:, None] * area[None, chunk] * jf * ff
            for k in range(3):
                np.add.at(out, mesh.faces[chunk, k], (wf * B[:, k, None]).sum(axis=0))
    return out


def integrate(mesh: SphereMesh, f):
    """Integral over S^2 of a function given as a callable of points (N, 3)."""
    x, w = quadrature_points(mesh)
    return float(np.sum(w * f(x)))


# ---------------------------------------------------------------- mesh files

def save_mesh(path, mesh: SphereMesh):
    with open(path, "w") as fh:
        fh.write(f"hmflow-mesh v1 {mesh.n_vertices} {mesh.n_faces}\n")
        np.savetxt(fh, mesh.vertices, fmt="%.17g")
        np.savetxt(fh, mesh.faces, fmt="%d")


def load_mesh(path) -> SphereMesh:
    with open(path) as fh:
        head = fh.readline().split()
        if len(head) != 4 or head[:2] != ["hmflow-mesh", "v1"]:
            raise CorruptFileError(f"{path}: bad mesh header")
        nv, nf = int(head[2]), int(head[3])
        rows = fh.read().split("\n")
    rows = [r for r in rows if r.strip()]
    if len(rows) != nv + nf:
        raise CorruptFileError(f"{path}: expected {nv + nf} rows, found {len(rows)}")
    try:
        V = np.array([[float(t) for t in r.split()] for r in rows[:nv]])
        F = np.array([[int(t) for t in r.split()] for r in rows[nv:]], dtype=np.int64)
    except ValueError as exc:
        raise CorruptFileError(f"{path}: {exc}") from None
    if V.shape != (nv, 3) or F.shape != (nf, 3):
        raise CorruptFileError(f"{path}: malformed rows")
    if np.max(np.abs(np.linalg.norm(V, axis=1) - 1)) > 1e-12:
        raise CorruptFileError(f"{path}: vertices off the unit sphere")
    return SphereMesh(V, F, -1)
