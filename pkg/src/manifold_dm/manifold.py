"""Embedded submanifolds {x : xi(x) = 0} of R^n and their geometric primitives.

Every method accepts a single point of shape ``(n,)`` or a batch of shape
``(m, n)`` and returns arrays with the matching leading shape.
"""
from __future__ import annotations

import numpy as np
import scipy.linalg

from .errors import (
    DimensionError,
    GeometricDegeneracyError,
    InvalidTangentError,
    MeshQualityError,
    ProjectionError,
)

# Relative column norm below which modified Gram-Schmidt declares rank loss.
_RANK_TOL = 1e-10


def _as_batch(x, n):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    if x2.ndim != 2 or x2.shape[-1] != n:
        raise DimensionError(f"expected points with {n} coordinates, got shape {x.shape}")
    return x2, single


def _unbatch(arr, single):
    return arr[0] if single else arr


def gram_schmidt(columns):
    """Modified Gram-Schmidt over the last axis, in column order.

    ``columns`` has shape ``(m, n, k)``; returns an orthonormal frame of the same
    shape spanning the same column space.
    """
    g = np.array(columns, dtype=float, copy=True)
    m, n, k = g.shape
    q = np.empty_like(g)
    scale = np.linalg.norm(g, axis=1)
    for j in range(k):
        v = g[:, :, j]
        for i in range(j):
            v = v - np.einsum("mn,mn->m", q[:, :, i], v)[:, None] * q[:, :, i]
        norm = np.linalg.norm(v, axis=1)
        bad = norm <= _RANK_TOL * np.maximum(scale[:, j], np.finfo(float).tiny)
        if np.any(bad):
            raise GeometricDegeneracyError(
                f"constraint Jacobian is rank deficient (column {j}) at batch rows "
                f"{np.flatnonzero(bad)[:10].tolist()}"
            )
        q[:, :, j] = v / norm[:, None]
    return q


class Manifold:
    """Base class. Subclasses define ``constraint`` and ``constraint_jacobian``.

    ``constraint_jacobian`` returns grad xi with shape ``(m, n, n - d)``; the
    normal frame and projector are derived from it.
    """

    kind = "manifold"
    ambient_dim: int
    intrinsic_dim: int
    newton_iters = 50
    newton_tol = 1e-10

    @property
    def codim(self):
        return self.ambient_dim - self.intrinsic_dim

    def constraint(self, x):
        raise NotImplementedError

    def constraint_jacobian(self, x):
        raise NotImplementedError

    def normal_frame(self, x):
        xb, single = _as_batch(x, self.ambient_dim)
        return _unbatch(gram_schmidt(self._jacobian_batch(xb)), single)

    def _jacobian_batch(self, xb):
        return self.constraint_jacobian(xb)

    def projection_matrix(self, x):
        xb, single = _as_batch(x, self.ambient_dim)
        nf = self.normal_frame(xb)
        p = np.eye(self.ambient_dim) - nf @ np.swapaxes(nf, 1, 2)
        return _unbatch(p, single)

    def tangent_project(self, x, v, frame=None):
        """P(x) v without assembling P."""
        xb, single = _as_batch(x, self.ambient_dim)
        vb, _ = _as_batch(v, self.ambient_dim)
        nf = self.normal_frame(xb) if frame is None else np.asarray(frame).reshape(xb.shape[0], self.ambient_dim, -1)
        coef = np.einsum("mnk,mn->mk", nf, vb)
        return _unbatch(vb - np.einsum("mnk,mk->mn", nf, coef), single)

    def project(self, x):
        """Closest-point projection; default is constrained Gauss-Newton."""
        xb, single = _as_batch(x, self.ambient_dim)
        y = xb.copy()
        res = np.linalg.norm(self.constraint(y), axis=1)
        for _ in range(self.newton_iters):
            active = res > self.newton_tol
            if not np.any(active):
                break
            ya = y[active]
            jac = self.constraint_jacobian(ya)
            xi = self.constraint(ya)
            gram = np.swapaxes(jac, 1, 2) @ jac
            step = np.linalg.solve(gram, xi[..., None])[..., 0]
            y[active] = ya - np.einsum("mnk,mk->mn", jac, step)
            res = np.linalg.norm(self.constraint(y), axis=1)
        failed = np.flatnonzero(~(res <= self.newton_tol))
        if failed.size:
            raise ProjectionError(
                f"projection did not converge for {failed.size} point(s)",
                failed, res[failed],
            )
        return _unbatch(y, single)

    def exponential_map(self, base, tangent):
        raise NotImplementedError(f"exponential map not available for {self.kind}")

    def distance_to(self, x):
        xb, single = _as_batch(x, self.ambient_dim)
        return _unbatch(np.linalg.norm(xb - self.project(xb), axis=1), single)

    def contains(self, x, tol=1e-8):
        xb, _ = _as_batch(x, self.ambient_dim)
        return np.linalg.norm(self.constraint(xb).reshape(xb.shape[0], -1), axis=1) <= tol

    def constraint_value(self, x):
        xb, single = _as_batch(x, self.ambient_dim)
        return _unbatch(self.constraint(xb), single)

    def describe(self):
        return {"kind": self.kind, "ambient_dim": self.ambient_dim,
                "intrinsic_dim": self.intrinsic_dim}


class Hyperplane(Manifold):
    """{x : a . x = b} with unit normal a."""

    kind = "hyperplane"

    def __init__(self, normal=(0.0, 0.0, 1.0), offset=0.0):
        a = np.asarray(normal, dtype=float)
        norm = np.linalg.norm(a)
        if a.ndim != 1 or norm == 0:
            raise DimensionError("hyperplane normal must be a nonzero vector")
        self.normal = a / norm
        self.offset = float(offset) / norm
        self.ambient_dim = a.size
        self.intrinsic_dim = a.size - 1

    def constraint(self, x):
        xb, single = _as_batch(x, self.ambient_dim)
        return _unbatch((xb @ self.normal - self.offset)[:, None], single)

    def constraint_jacobian(self, x):
        xb, _ = _as_batch(x, self.ambient_dim)
        return np.broadcast_to(self.normal[None, :, None], (xb.shape[0], self.ambient_dim, 1)).copy()

    def normal_frame(self, x):
        xb, single = _as_batch(x, self.ambient_dim)
        return _unbatch(self.constraint_jacobian(xb), single)

    def project(self, x):
        xb, single = _as_batch(x, self.ambient_dim)
        y = xb - (xb @ self.normal - self.offset)[:, None] * self.normal
        return _unbatch(y, single)

    def exponential_map(self, base, tangent):
        xb, single = _as_batch(base, self.ambient_dim)
        vb, _ = _as_batch(tangent, self.ambient_dim)
        if np.any(np.abs(vb @ self.normal) > 1e-8 * (1 + np.linalg.norm(vb, axis=1))):
            raise InvalidTangentError("tangent vector has a normal component")
        return _unbatch(xb + vb, single)

    def describe(self):
        return {**super().describe(), "normal": self.normal.tolist(), "offset": self.offset}


class Sphere(Manifold):
    """Round sphere |x - c| = r in R^n (the circle when n = 2)."""

    kind = "sphere"

    def __init__(self, ambient_dim=3, radius=1.0, center=None):
        self.ambient_dim = int(ambient_dim)
        self.intrinsic_dim = self.ambient_dim - 1
        self.radius = float(radius)
        self.center = np.zeros(self.ambient_dim) if center is None else np.asarray(center, float)

    def constraint(self, x):
        xb, single = _as_batch(x, self.ambient_dim)
        r2 = np.sum((xb - self.center) ** 2, axis=1)
        return _unbatch((r2 - self.radius ** 2)[:, None], single)

    def constraint_jacobian(self, x):
        xb, _ = _as_batch(x, self.ambient_dim)
        return 2.0 * (xb - self.center)[:, :, None]

    def project(self, x):
        xb, single = _as_batch(x, self.ambient_dim)
        d = xb - self.center
        r = np.linalg.norm(d, axis=1)
        if np.any(r == 0):
            raise ProjectionError("projection of the sphere center is undefined",
                                  np.flatnonzero(r == 0), r[r == 0])
        return _unbatch(self.center + self.radius * d / r[:, None], single)

    def exponential_map(self, base, tangent):
        xb, single = _as_batch(base, self.ambient_dim)
        vb, _ = _as_batch(tangent, self.ambient_dim)
        u = (xb - self.center) / self.radius
        if np.any(np.abs(np.sum(u * vb, axis=1)) > 1e-8 * (1 + np.linalg.norm(vb, axis=1))):
            raise InvalidTangentError("tangent vector has a radial component")
        speed = np.linalg.norm(vb, axis=1)
        ang = speed / self.radius
        safe = np.where(speed > 0, speed, 1.0)
        y = self.center + self.radius * (np.cos(ang)[:, None] * u
                                         + np.sin(ang)[:, None] * vb / safe[:, None])
        return _unbatch(y, single)

    def describe(self):
        return {**super().describe(), "radius": self.radius, "center": self.center.tolist()}


def Circle(radius=1.0, center=None):
    return Sphere(2, radius, center)


class SpecialOrthogonal(Manifold):
    """SO(k) as the level set of the upper triangle of QQ^T - I in R^{k*k}.

    Points are row-major flattened k x k matrices.
    """

    kind = "so"

    def __init__(self, k):
        self.k = int(k)
        self.ambient_dim = self.k * self.k
        self.intrinsic_dim = self.k * (self.k - 1) // 2
        self._iu = np.triu_indices(self.k)

    def _mat(self, xb):
        return xb.reshape(-1, self.k, self.k)

    def constraint(self, x):
        xb, single = _as_batch(x, self.ambient_dim)
        q = self._mat(xb)
        g = q @ np.swapaxes(q, 1, 2) - np.eye(self.k)
        return _unbatch(g[:, self._iu[0], self._iu[1]], single)

    def constraint_jacobian(self, x):
        xb, _ = _as_batch(x, self.ambient_dim)
        k = self.k
        q = self._mat(xb)
        m = xb.shape[0]
        jac = np.zeros((m, k, k, len(self._iu[0])))
        # d(QQ^T)_{ij} / dQ_{ab} = delta_{ia} Q_{jb} + delta_{ja} Q_{ib}
        for p, (i, j) in enumerate(zip(*self._iu)):
            jac[:, i, :, p] += q[:, j, :]
            jac[:, j, :, p] += q[:, i, :]
        return jac.reshape(m, k * k, -1)

    def project(self, x):
        xb, single = _as_batch(x, self.ambient_dim)
        u, _, vt = np.linalg.svd(self._mat(xb))
        det = np.linalg.det(u @ vt)
        u[:, :, -1] *= np.sign(det)[:, None]
        return _unbatch((u @ vt).reshape(-1, self.ambient_dim), single)

    def exponential_map(self, base, tangent):
        """Q expm(A) for tangent = Q A with A skew-symmetric."""
        xb, single = _as_batch(base, self.ambient_dim)
        vb, _ = _as_batch(tangent, self.ambient_dim)
        q = self._mat(xb)
        a = np.swapaxes(q, 1, 2) @ self._mat(vb)
        asym = np.linalg.norm(a + np.swapaxes(a, 1, 2), axis=(1, 2))
        if np.any(asym > 1e-8 * (1 + np.linalg.norm(a, axis=(1, 2)))):
            raise InvalidTangentError("Q^T V is not skew-symmetric")
        a = 0.5 * (a - np.swapaxes(a, 1, 2))
        out = q @ scipy.linalg.expm(a)
        return _unbatch(out.reshape(-1, self.ambient_dim), single)

    def describe(self):
        return {**super().describe(), "k": self.k}


def closest_points_on_triangles(x, tri):
    """Closest points from each query to each triangle.

    ``x`` is ``(m, 3)`` and ``tri`` is ``(F, 3, 3)``. Returns ``(points, dist2)``
    with shapes ``(m, F, 3)`` and ``(m, F)``.

    The query is dropped onto each face plane; if the foot has a negative
    barycentric coordinate the nearest point over the three edges is used.
    """
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    e0, e1 = b - a, c - a
    nrm = np.cross(e0, e1)
    nrm = nrm / np.linalg.norm(nrm, axis=1, keepdims=True)
    rel = x[:, None, :] - a[None]
    foot = x[:, None, :] - np.einsum("mfk,fk->mf", rel, nrm)[..., None] * nrm[None]

    d00 = np.sum(e0 * e0, axis=1)
    d01 = np.sum(e0 * e1, axis=1)
    d11 = np.sum(e1 * e1, axis=1)
    denom = d00 * d11 - d01 * d01
    fr = foot - a[None]
    d20 = np.einsum("mfk,fk->mf", fr, e0)
    d21 = np.einsum("mfk,fk->mf", fr, e1)
    v = (d11 * d20 - d01 * d21) / denom
    w = (d00 * d21 - d01 * d20) / denom
    u = 1.0 - v - w
    inside = (u >= 0) & (v >= 0) & (w >= 0)

    best = foot.copy()
    best_d2 = np.full(inside.shape, np.inf)
    for p, q in ((a, b), (b, c), (c, a)):
        seg = q - p
        s = np.einsum("mfk,fk->mf", x[:, None, :] - p[None], seg) / np.sum(seg * seg, axis=1)
        s = np.clip(s, 0.0, 1.0)
        cand = p[None] + s[..., None] * seg[None]
        d2 = np.sum((x[:, None, :] - cand) ** 2, axis=2)
        take = d2 < best_d2
        best_d2 = np.where(take, d2, best_d2)
        best = np.where(take[..., None], cand, best)
    out = np.where(inside[..., None], foot, best)
    dist2 = np.sum((x[:, None, :] - out) ** 2, axis=2)
    return out, dist2


class TriangleMesh(Manifold):
    """Closed or open triangle mesh in R^3.

    Off-mesh points inherit P and N from the face owning their closest point;
    ties along edges and vertices go to the smallest face index.
    """

    kind = "mesh"
    chunk = 1 << 21  # queries x faces per vectorized block
    tie_tol = 1e-12

    def __init__(self, vertices, faces):
        self.vertices = np.asarray(vertices, dtype=float)
        self.faces = np.asarray(faces, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise DimensionError("vertices must have shape (V, 3)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise DimensionError("faces must have shape (F, 3)")
        if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
            raise DimensionError("face index out of range")
        self.ambient_dim = 3
        self.intrinsic_dim = 2
        tri = self.vertices[self.faces]
        cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        norm = np.linalg.norm(cross, axis=1)
        scale = np.max(np.ptp(self.vertices, axis=0)) ** 2
        bad = norm <= 1e-14 * scale
        if np.any(bad):
            raise MeshQualityError(f"degenerate faces: {np.flatnonzero(bad)[:10].tolist()}")
        self.triangles = tri
        self.face_areas = 0.5 * norm
        self.face_normals = cross / norm[:, None]
        self.face_normals.setflags(write=False)
        self.triangles.setflags(write=False)

    @property
    def n_faces(self):
        return len(self.faces)

    def closest(self, x):
        """Return ``(points, face_index)`` of the closest mesh points."""
        xb, single = _as_batch(x, 3)
        m = xb.shape[0]
        step = max(1, self.chunk // max(1, self.n_faces))
        pts = np.empty_like(xb)
        idx = np.empty(m, dtype=np.int64)
        for start in range(0, m, step):
            sl = slice(start, start + step)
            cand, d2 = closest_points_on_triangles(xb[sl], self.triangles)
            dist = np.sqrt(d2)
            dmin = dist.min(axis=1, keepdims=True)
            near = dist <= dmin + self.tie_tol * np.maximum(1.0, dmin)
            j = np.argmax(near, axis=1)
            idx[sl] = j
            pts[sl] = cand[np.arange(len(j)), j]
        return _unbatch(pts, single), (idx[0] if single else idx)

    def project(self, x):
        return self.closest(x)[0]

    def face_of(self, x):
        return self.closest(x)[1]

    def constraint(self, x):
        """Unsigned distance to the surface as a length-1 vector."""
        xb, single = _as_batch(x, 3)
        return _unbatch(np.linalg.norm(xb - self.project(xb), axis=1)[:, None], single)

    def normal_frame(self, x):
        xb, single = _as_batch(x, 3)
        _, idx = self.closest(xb)
        return _unbatch(self.face_normals[idx][:, :, None].copy(), single)

    def constraint_jacobian(self, x):
        return self.normal_frame(x)

    def exponential_map(self, base, tangent):
        raise NotImplementedError("meshes do not provide an exponential map")

    def barycentric(self, x, faces):
        """Barycentric coordinates of ``x`` w.r.t. the given faces (plane foot)."""
        xb, _ = _as_batch(x, 3)
        tri = self.triangles[np.asarray(faces)]
        a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
        e0, e1, r = b - a, c - a, xb - a
        d00 = np.sum(e0 * e0, 1); d01 = np.sum(e0 * e1, 1); d11 = np.sum(e1 * e1, 1)
        d20 = np.sum(r * e0, 1); d21 = np.sum(r * e1, 1)
        den = d00 * d11 - d01 * d01
        v = (d11 * d20 - d01 * d21) / den
        w = (d00 * d21 - d01 * d20) / den
        return np.stack([1 - v - w, v, w], axis=1)

    @property
    def area(self):
        return float(self.face_areas.sum())

    def describe(self):
        return {**super().describe(), "n_vertices": len(self.vertices), "n_faces": self.n_faces}


def read_obj(path):
    """Read ``v`` and ``f`` records of a triangle-only OBJ file."""
    verts, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                if len(idx) != 3:
                    raise MeshQualityError(f"{path}:{lineno}: only triangular faces are supported")
                faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
    return TriangleMesh(np.array(verts), np.array(faces, dtype=np.int64))


def write_obj(path, mesh):
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write("v {!r} {!r} {!r}\n".format(*map(float, v)))
        for f in mesh.faces:
            fh.write("f {} {} {}\n".format(*(int(i) + 1 for i in f)))


def icosahedron(radius=1.0):
    """Regular icosahedron with outward-oriented faces and the given circumradius."""
    phi = (1 + 5 ** 0.5) / 2
    v = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=float)
    v *= radius / np.linalg.norm(v[0])
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ])
    return TriangleMesh(v, f)


def build_manifold(kind, **params):
    """Construct a manifold from config keys."""
    kind = kind.lower()
    if kind == "hyperplane":
        return Hyperplane(params.get("normal", (0.0, 0.0, 1.0)), params.get("offset", 0.0))
    if kind in ("sphere", "circle"):
        dim = 2 if kind == "circle" else int(params.get("ambient_dim", 3))
        return Sphere(dim, params.get("radius", 1.0))
    if kind == "so":
        return SpecialOrthogonal(int(params["k"]))
    if kind == "icosahedron":
        return icosahedron(params.get("radius", 1.0))
    if kind == "mesh":
        return read_obj(params["mesh_path"])
    raise DimensionError(f"unknown manifold kind {kind!r}")
