"""Two-sample distances between generated and reference point sets."""
from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

W2_MAX_POINTS = 4096


def _points(a, name):
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if len(a) == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    return a


def median_bandwidth(Y, max_points=2000):
    """Median pairwise distance of ``Y`` (deterministic stride subsample)."""
    Y = _points(Y, "Y")
    if len(Y) > max_points:
        Y = Y[:: int(np.ceil(len(Y) / max_points))]
    d = cdist(Y, Y)
    med = float(np.median(d[np.triu_indices(len(Y), 1)])) if len(Y) > 1 else 1.0
    return med if med > 0 else 1.0


def _kernel_sum(A, B, gamma, chunk=2048):
    total = 0.0
    for i in range(0, len(A), chunk):
        d2 = cdist(A[i:i + chunk], B, "sqeuclidean")
        total += float(np.exp(-d2 / (2 * gamma * gamma)).sum())
    return total


def mmd(X, Y, bandwidth=None):
    """Biased (V-statistic) MMD with a Gaussian kernel exp(-|a-b|^2 / (2 g^2)).

    Returns sqrt(max(0, MMD^2)). ``bandwidth=None`` uses the median heuristic
    on ``Y`` so that comparisons against a fixed reference share a kernel.
    """
    X, Y = _points(X, "X"), _points(Y, "Y")
    if X.shape[1] != Y.shape[1]:
        raise ValueError("X and Y have different dimensions")
    g = median_bandwidth(Y) if bandwidth is None else float(bandwidth)
    kxx = _kernel_sum(X, X, g) / len(X) ** 2
    kyy = _kernel_sum(Y, Y, g) / len(Y) ** 2
    kxy = _kernel_sum(X, Y, g) / (len(X) * len(Y))
    return float(np.sqrt(max(0.0, kxx + kyy - 2 * kxy)))


def w1_1d(a, b):
    """Exact 1-D W1 between empirical measures via the CDF integral."""
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    if len(a) == len(b):
        return float(np.mean(np.abs(a - b)))
    allv = np.sort(np.concatenate([a, b]))
    dx = np.diff(allv)
    fa = np.searchsorted(a, allv[:-1], side="right") / len(a)
    fb = np.searchsorted(b, allv[:-1], side="right") / len(b)
    return float(np.sum(np.abs(fa - fb) * dx))


def random_directions(dim, n_proj, rng):
    u = rng.standard_normal((n_proj, dim))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def sliced_w1(X, Y, n_proj=128, rng=None, directions=None):
    """Mean 1-D W1 over random unit directions."""
    X, Y = _points(X, "X"), _points(Y, "Y")
    if directions is None:
        if n_proj < 1:
            raise ValueError("n_proj must be >= 1")
        rng = np.random.default_rng(0) if rng is None else rng
        directions = random_directions(X.shape[1], n_proj, rng)
    px, py = X @ directions.T, Y @ directions.T
    if len(X) == len(Y):
        return float(np.mean(np.abs(np.sort(px, axis=0) - np.sort(py, axis=0))))
    return float(np.mean([w1_1d(px[:, k], py[:, k]) for k in range(len(directions))]))


def w2(X, Y):
    """Exact 2-Wasserstein distance between equal-size point clouds."""
    X, Y = _points(X, "X"), _points(Y, "Y")
    if len(X) != len(Y):
        raise ValueError("w2 needs equal sample sizes")
    if len(X) > W2_MAX_POINTS:
        raise ValueError(f"w2 is exact only up to {W2_MAX_POINTS} points; subsample first")
    cost = cdist(X, Y, "sqeuclidean")
    r, c = linear_sum_assignment(cost)
    return float(np.sqrt(cost[r, c].mean()))


def face_histogram(labels, n_faces):
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_faces)
    return counts / counts.sum()


def js_divergence(p, q):
    """Jensen-Shannon divergence in nats, in [0, ln 2]."""
    p = np.asarray(p, float)
    q = np.asarray(q, float)
    m = 0.5 * (p + q)

    def kl(a):
        nz = a > 0
        return float(np.sum(a[nz] * np.log(a[nz] / m[nz])))

    return 0.5 * kl(p) + 0.5 * kl(q)


def js_face_histogram(mesh, X, Y, labels_x=None, labels_y=None):
    """JS divergence between per-face relative frequencies of two point sets."""
    if labels_x is None:
        labels_x = mesh.face_of(_points(X, "X"))
    if labels_y is None:
        labels_y = mesh.face_of(_points(Y, "Y"))
    if len(labels_x) == 0 or len(labels_y) == 0:
        raise ValueError("empty sample")
    return js_divergence(face_histogram(labels_x, mesh.n_faces),
                         face_histogram(labels_y, mesh.n_faces))
