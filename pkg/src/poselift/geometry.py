"""Closed-form pose and camera geometry.

Poses are stored row-per-joint: a 3D pose is a (j, 3) array, a 2D pose is a
(j, 2) array. Camera-frame coordinates of a pose X under rotation R are
therefore X @ R.T (the transpose of the column convention R @ X).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegeneratePose, ShapeMismatch

DEGENERATE_NORM_EPS = 1e-9
SMALL_ANGLE_EPS = 1e-8


@dataclass(frozen=True)
class Pose2D:
    """2D joint observations plus per-joint detector confidences."""

    joints: np.ndarray  # (j, 2)
    confidences: np.ndarray  # (j,) in [0, 1]

    def __post_init__(self):
        joints = np.asarray(self.joints, dtype=np.float64)
        conf = np.asarray(self.confidences, dtype=np.float64)
        if joints.ndim != 2 or joints.shape[1] != 2:
            raise ShapeMismatch(f"2D pose must be (j, 2), got {joints.shape}")
        if conf.shape != (joints.shape[0],):
            raise ShapeMismatch(
                f"confidences must be ({joints.shape[0]},), got {conf.shape}"
            )
        if not np.all(np.isfinite(joints)) or not np.all(np.isfinite(conf)):
            raise ValueError("2D pose contains non-finite values")
        if np.any(conf < 0.0) or np.any(conf > 1.0):
            raise ValueError("confidences must lie in [0, 1]")
        object.__setattr__(self, "joints", joints)
        object.__setattr__(self, "confidences", conf)

    @property
    def joint_count(self) -> int:
        return self.joints.shape[0]


@dataclass(frozen=True)
class SimilarityTransform:
    """x -> scale * (x @ rotation.T) + translation."""

    scale: float
    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * points @ self.rotation.T + self.translation


def as_pose3d(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3 or x.shape[0] < 2:
        raise ShapeMismatch(f"3D pose must be (j >= 2, 3), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("3D pose contains non-finite values")
    return x


def is_rotation_matrix(r: np.ndarray, tol: float = 1e-9) -> bool:
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3):
        return False
    ortho = np.linalg.norm(r @ r.T - np.eye(3))
    return ortho < tol and abs(np.linalg.det(r) - 1.0) < tol


def normalize_pose2d(w: Pose2D, root_index: int = 0) -> Pose2D:
    """Center a 2D pose on its root joint and scale to unit Frobenius norm."""
    j = w.joint_count
    if not 0 <= root_index < j:
        raise IndexError(f"root_index {root_index} out of range for {j} joints")
    centered = w.joints - w.joints[root_index]
    norm = np.linalg.norm(centered)
    if norm < DEGENERATE_NORM_EPS:
        raise DegeneratePose("all joints coincide; Frobenius norm ~ 0")
    return Pose2D(centered / norm, w.confidences)


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix of a 3-vector."""
    x, y, z = np.asarray(v, dtype=np.float64)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rodrigues(v: np.ndarray) -> np.ndarray:
    """Rotation matrix for an axis-angle 3-vector (angle times unit axis).

    Below SMALL_ANGLE_EPS the first-order limit I + skew(v) is returned,
    which avoids the 0/0 in the axis normalization.
    """
    v = np.asarray(v, dtype=np.float64).reshape(3)
    theta = np.linalg.norm(v)
    a = skew(v)
    if theta < SMALL_ANGLE_EPS:
        return np.eye(3) + a
    # Coefficients absorb the axis normalization: A(v) = theta * A(omega).
    k1 = np.sin(theta) / theta
    k2 = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + k1 * a + k2 * (a @ a)


def project_weak_perspective(r: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Rotate a pose into the camera frame and drop the depth coordinate."""
    x = as_pose3d(x)
    return (x @ np.asarray(r, dtype=np.float64).T)[:, :2]


def relative_rotation(r1: np.ndarray, r2: np.ndarray) -> np.ndarray:
    """Rotation taking camera-1 coordinates to camera-2 coordinates."""
    return np.asarray(r2, dtype=np.float64) @ np.asarray(r1, dtype=np.float64).T


def similarity_align(
    source: np.ndarray, target: np.ndarray, with_scale: bool = True
) -> tuple[np.ndarray, SimilarityTransform]:
    """Least-squares similarity (or rigid, if with_scale=False) alignment.

    Returns the transformed source and the transform minimizing
    sum_i || s * R @ source_i + t - target_i ||^2, with the reflection
    resolved towards det(R) = +1 by flipping the smallest singular direction.
    """
    source = as_pose3d(source)
    target = as_pose3d(target)
    if source.shape != target.shape:
        raise ShapeMismatch(
            f"pose shapes differ: {source.shape} vs {target.shape}"
        )
    mu_s = source.mean(axis=0)
    mu_t = target.mean(axis=0)
    cs = source - mu_s
    ct = target - mu_t
    var_s = (cs * cs).sum()
    if var_s < DEGENERATE_NORM_EPS**2 or (ct * ct).sum() < DEGENERATE_NORM_EPS**2:
        raise DegeneratePose("zero-variance pose in similarity alignment")
    cov = ct.T @ cs
    u, s, vt = np.linalg.svd(cov)
    d = np.ones(3)
    if np.linalg.det(u @ vt) < 0.0:
        d[-1] = -1.0
    rot = u @ np.diag(d) @ vt
    scale = float((s * d).sum() / var_s) if with_scale else 1.0
    trans = mu_t - scale * rot @ mu_s
    xform = SimilarityTransform(scale, rot, trans)
    return xform.apply(source), xform


def optimal_scale(pred: np.ndarray, gt: np.ndarray) -> float:
    """Least-squares minimizer of ||s * pred - gt||_F."""
    pred = as_pose3d(pred)
    gt = as_pose3d(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pose shapes differ: {pred.shape} vs {gt.shape}")
    denom = float((pred * pred).sum())
    if denom < 1e-12:
        raise DegeneratePose("prediction is all-zero; scale undefined")
    return float((pred * gt).sum() / denom)
