"""ADD / ADI pose-error metrics and thresholded accuracies.

All math here is double precision and framework-free so it can serve as the
scoring side for any model. ADI uses an exhaustive nearest-vertex search;
at 14 mesh vertices there is nothing to accelerate.
"""

from __future__ import annotations

import numpy as np


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix from a (w, x, y, z) quaternion (normalized first)."""
    q = np.asarray(q, dtype=np.float64).reshape(4)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise ValueError("quat_to_matrix: zero-norm quaternion")
    w, x, y, z = q / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quats_to_matrices(quats) -> np.ndarray:
    """Vectorized quat_to_matrix for an (n, 4) array of (w, x, y, z) rows."""
    q = np.asarray(quats, dtype=np.float64)
    norms = np.linalg.norm(q, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise ValueError("quats_to_matrices: zero-norm quaternion in batch")
    w, x, y, z = (q / norms).T
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


class Pose:
    """A rigid transform: 3x3 rotation plus translation in meters."""

    def __init__(self, rotation, translation):
        R = np.asarray(rotation, dtype=np.float64)
        t = np.asarray(translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise ValueError(f"Pose: rotation must be 3x3, got {R.shape}")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-5):
            raise ValueError("Pose: rotation is not orthonormal (RtR != I within 1e-5)")
        if abs(np.linalg.det(R) - 1.0) > 1e-5:
            raise ValueError("Pose: rotation determinant is not +1 within 1e-5")
        self.rotation = R
        self.translation = t

    @classmethod
    def from_quat(cls, q, translation) -> "Pose":
        return cls(quat_to_matrix(q), translation)

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation


def add_error(est: Pose, gt: Pose, vertices) -> float:
    """Mean distance between matched vertices under the two poses."""
    verts = np.asarray(vertices, dtype=np.float64)
    if verts.ndim != 2 or verts.shape[0] == 0 or verts.shape[1] != 3:
        raise ValueError(f"add_error: vertices must be (V, 3) with V >= 1, got {verts.shape}")
    d = est.apply(verts) - gt.apply(verts)
    return float(np.linalg.norm(d, axis=1).mean())


def adi_error(est: Pose, gt: Pose, vertices) -> float:
    """Mean distance to the closest ground-truth vertex (symmetric variant)."""
    verts = np.asarray(vertices, dtype=np.float64)
    if verts.ndim != 2 or verts.shape[0] == 0 or verts.shape[1] != 3:
        raise ValueError(f"adi_error: vertices must be (V, 3) with V >= 1, got {verts.shape}")
    p_est = est.apply(verts)
    p_gt = gt.apply(verts)
    diff = p_est[:, None, :] - p_gt[None, :, :]
    dists = np.linalg.norm(diff, axis=2)
    return float(dists.min(axis=1).mean())


def threshold_accuracy(errors, diameter: float, frac: float) -> float:
    """Fraction of samples with error strictly below frac * diameter."""
    if diameter <= 0:
        raise ValueError(f"threshold_accuracy: diameter must be positive, got {diameter}")
    errs = np.asarray(errors, dtype=np.float64)
    if errs.size == 0:
        raise ValueError("threshold_accuracy: empty error list")
    return float(np.mean(errs < frac * diameter))


# ---------------------------------------------------------------------------
# batched variants used by the evaluation loop
# ---------------------------------------------------------------------------

def add_errors_batch(R_est, t_est, R_gt, t_gt, vertices) -> np.ndarray:
    verts = np.asarray(vertices, dtype=np.float64)
    p_est = np.einsum("nij,vj->nvi", np.asarray(R_est, dtype=np.float64), verts) + np.asarray(t_est, dtype=np.float64)[:, None, :]
    p_gt = np.einsum("nij,vj->nvi", np.asarray(R_gt, dtype=np.float64), verts) + np.asarray(t_gt, dtype=np.float64)[:, None, :]
    return np.linalg.norm(p_est - p_gt, axis=2).mean(axis=1)


def adi_errors_batch(R_est, t_est, R_gt, t_gt, vertices) -> np.ndarray:
    verts = np.asarray(vertices, dtype=np.float64)
    p_est = np.einsum("nij,vj->nvi", np.asarray(R_est, dtype=np.float64), verts) + np.asarray(t_est, dtype=np.float64)[:, None, :]
    p_gt = np.einsum("nij,vj->nvi", np.asarray(R_gt, dtype=np.float64), verts) + np.asarray(t_gt, dtype=np.float64)[:, None, :]
    diff = p_est[:, :, None, :] - p_gt[:, None, :, :]
    dists = np.linalg.norm(diff, axis=3)
    return dists.min(axis=2).mean(axis=1)
