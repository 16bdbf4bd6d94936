"""Synthetic target distributions on the supported manifolds."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.stats import special_ortho_group

from .errors import DimensionError, MeshQualityError
from .oracles import GRID_MEANS, GRID_STD


def sample_gmm_plane(count, rng, means=GRID_MEANS, std=GRID_STD):
    """Equal-weight planar mixture embedded at z = 0 in R^3."""
    if count < 1:
        raise ValueError("count must be >= 1")
    means = np.asarray(means, dtype=float)
    k = rng.integers(len(means), size=count)
    xy = means[k] + std * rng.standard_normal((count, 2))
    return np.concatenate([xy, np.zeros((count, 1))], axis=1)


def random_son_centers(k, count, rng):
    """Haar-random rotations in SO(k), shape (count, k, k)."""
    if k == 1:
        return np.ones((count, 1, 1))
    mats = special_ortho_group.rvs(k, size=count, random_state=rng)
    return np.asarray(mats).reshape(count, k, k)


def random_skew(k, scale, count, rng):
    iu = np.triu_indices(k, 1)
    a = np.zeros((count, k, k))
    a[:, iu[0], iu[1]] = scale * rng.standard_normal((count, len(iu[0])))
    return a - np.swapaxes(a, 1, 2)


def sample_wrapped_normal_son(k, centers, scale, count, rng):
    """Mixture of wrapped normals C_j expm(A), A skew with N(0, scale^2) upper entries.

    Returns flattened (count, k*k) matrices.
    """
    centers = np.asarray(centers, dtype=float).reshape(-1, k, k)
    err = np.linalg.norm(centers @ np.swapaxes(centers, 1, 2) - np.eye(k), axis=(1, 2))
    if np.any(err > 1e-8) or np.any(np.linalg.det(centers) < 0):
        raise DimensionError("centers must lie on SO(k)")
    j = rng.integers(len(centers), size=count)
    a = random_skew(k, scale, count, rng)
    q = centers[j] @ scipy.linalg.expm(a)
    return q.reshape(count, k * k)


# ---------------------------------------------------------------------------
# meshes
# ---------------------------------------------------------------------------
def cotangent_laplacian(mesh):
    """Cotangent stiffness matrix L (positive semidefinite) and lumped mass diag.

    L_ij = -(cot a_ij + cot b_ij) / 2 for edges, L_ii = -sum_j L_ij; the mass of
    a vertex is a third of the area of its incident faces.
    """
    v, f = mesh.vertices, mesh.faces
    nv = len(v)
    lap = np.zeros((nv, nv))
    for corner in range(3):
        i, j, k = f[:, corner], f[:, (corner + 1) % 3], f[:, (corner + 2) % 3]
        u, w = v[j] - v[i], v[k] - v[i]
        cot = np.sum(u * w, axis=1) / np.linalg.norm(np.cross(u, w), axis=1)
        np.add.at(lap, (j, k), -0.5 * cot)
        np.add.at(lap, (k, j), -0.5 * cot)
    lap[np.diag_indices(nv)] = 0.0
    lap[np.diag_indices(nv)] = -lap.sum(axis=1)
    mass = np.zeros(nv)
    for corner in range(3):
        np.add.at(mass, f[:, corner], mesh.face_areas / 3.0)
    if np.any(mass <= 0):
        raise MeshQualityError("isolated vertices have zero mass")
    return lap, mass


def laplacian_eigenpairs(mesh, count=None):
    """Generalized eigenpairs L phi = lam M phi, ascending, M-orthonormal."""
    lap, mass = cotangent_laplacian(mesh)
    vals, vecs = scipy.linalg.eigh(lap, np.diag(mass))
    if count is not None:
        vals, vecs = vals[:count], vecs[:, :count]
    return vals, vecs, lap, mass


@dataclass
class MeshDensity:
    """Piecewise-linear density given by per-vertex values.

    ``vertex_values`` integrate to 1 over the surface under linear
    interpolation; ``face_probs`` are the face masses (area * mean of corners).
    """

    mesh: object
    vertex_values: np.ndarray
    face_probs: np.ndarray
    components: np.ndarray  # (n_components, V), each normalized
    eigen_indices: tuple
    eigenvalues: np.ndarray

    def density_at(self, faces, bary):
        return np.sum(self.vertex_values[self.mesh.faces[faces]] * bary, axis=1)


def _face_mass(mesh, values):
    return mesh.face_areas * values[mesh.faces].mean(axis=1)


def mesh_eigen_density(mesh, eigen_indices, face_blacklist=()):
    """Equal-weight mixture of clamped Laplacian eigenfunctions.

    Each eigenvector's sign is chosen so that its positive part carries the
    larger mass; the clamp max(phi, 0) is then normalized to unit integral.
    Vertex values touching blacklisted faces are left unchanged but those
    faces receive zero probability.
    """
    eigen_indices = tuple(int(i) for i in eigen_indices)
    need = max(eigen_indices) + 1
    if need > len(mesh.vertices):
        raise ValueError(f"mesh has only {len(mesh.vertices)} eigenpairs")
    vals, vecs, _, _ = laplacian_eigenpairs(mesh)
    comps = []
    allowed = np.ones(mesh.n_faces, dtype=bool)
    allowed[list(face_blacklist)] = False
    for i in eigen_indices:
        phi = vecs[:, i].copy()
        pos = _face_mass(mesh, np.maximum(phi, 0))[allowed].sum()
        neg = _face_mass(mesh, np.maximum(-phi, 0))[allowed].sum()
        if neg > pos:
            phi = -phi
        clamped = np.maximum(phi, 0.0)
        total = _face_mass(mesh, clamped)[allowed].sum()
        if total <= 0:
            raise ValueError(f"eigenfunction {i} has no positive mass")
        comps.append(clamped / total)
    comps = np.array(comps)
    values = comps.mean(axis=0)
    probs = np.where(allowed, _face_mass(mesh, values), 0.0)
    total = probs.sum()
    return MeshDensity(mesh, values / total, probs / total, comps, eigen_indices,
                       vals[list(eigen_indices)])


def sample_mesh_density(density, count, rng, return_faces=False):
    """Draw a face by probability, then a point on it by rejection.

    Barycentric coordinates are uniform; a proposal is accepted against the
    linear density on its face with the max corner value as envelope. Rejected
    proposals are redrawn on the same face so face frequencies stay exact.
    """
    mesh = density.mesh
    faces = rng.choice(mesh.n_faces, size=count, p=density.face_probs)
    corner = density.vertex_values[mesh.faces[faces]]
    env = corner.max(axis=1)
    bary = np.empty((count, 3))
    pending = np.arange(count)
    while pending.size:
        r1, r2 = rng.random(pending.size), rng.random(pending.size)
        flip = r1 + r2 > 1
        r1[flip], r2[flip] = 1 - r1[flip], 1 - r2[flip]
        b = np.stack([1 - r1 - r2, r1, r2], axis=1)
        dens = np.sum(corner[pending] * b, axis=1)
        keep = rng.random(pending.size) * env[pending] <= dens
        bary[pending[keep]] = b[keep]
        pending = pending[~keep]
    pts = np.einsum("mk,mkj->mj", bary, mesh.triangles[faces])
    return (pts, faces) if return_faces else pts
