"""Evaluation metrics: MPJPE, PMPJPE, PCK, the correct-pose score and curve.

Conventions: the per-pose correctness indicator uses a strict inequality
(every joint error < threshold); PCK uses an inclusive one (error <= 150mm).
Correct-pose alignment is the same similarity alignment used for PMPJPE.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyEvalSet, MissingGroundTruth, ShapeMismatch
from .geometry import as_pose3d, optimal_scale, similarity_align

CPS_MAX_MM = 300.0
CP_THRESHOLDS_MM = np.arange(0.0, CPS_MAX_MM + 1.0)  # 1mm steps for the curve
PCK_THRESHOLD_MM = 150.0


def mpjpe(pred: np.ndarray, gt: np.ndarray, scale_adjust: bool = False) -> float:
    """Mean Euclidean joint distance; optionally after the least-squares
    scale fit of pred to gt."""
    pred = as_pose3d(pred)
    gt = as_pose3d(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pose shapes differ: {pred.shape} vs {gt.shape}")
    if scale_adjust:
        pred = optimal_scale(pred, gt) * pred
    return float(np.linalg.norm(pred - gt, axis=1).mean())


def pmpjpe(pred: np.ndarray, gt: np.ndarray, with_scale: bool = True) -> float:
    """MPJPE after similarity (Procrustes) alignment of pred to gt.

    with_scale=False restricts the alignment to rotation + translation.
    """
    aligned, _ = similarity_align(pred, gt, with_scale=with_scale)
    return mpjpe(aligned, gt, scale_adjust=False)


def pck(preds, gts, threshold: float = PCK_THRESHOLD_MM) -> float:
    """Percentage of joints with error <= threshold, over the whole set.

    Poses must already be aligned per the evaluation protocol in use.
    """
    preds, gts = list(preds), list(gts)
    if not preds or len(preds) != len(gts):
        raise EmptyEvalSet("need equal-length nonempty prediction/gt lists")
    errors = np.concatenate(
        [np.linalg.norm(as_pose3d(p) - as_pose3d(g), axis=1) for p, g in zip(preds, gts)]
    )
    return float(100.0 * (errors <= threshold).mean())


def max_joint_error(pred: np.ndarray, gt: np.ndarray, align: bool = True) -> float:
    """Largest per-joint error, after similarity alignment by default."""
    if align:
        pred, _ = similarity_align(pred, gt)
    return float(np.linalg.norm(as_pose3d(pred) - as_pose3d(gt), axis=1).max())


def correct_pose(pred: np.ndarray, gt: np.ndarray, threshold: float, align: bool = True) -> int:
    """1 iff every joint of the aligned pose is strictly below threshold."""
    return int(max_joint_error(pred, gt, align=align) < threshold)


def cps(preds, gts, align: bool = True) -> tuple[float, np.ndarray]:
    """Correct-pose score: exact area under CP(theta) for theta in [0, 300]mm.

    CP is a step function of the per-pose max errors e_k, so the area is
    (1/n) * sum_k max(0, 300 - min(e_k, 300)). Also returns the CP curve
    sampled at 1mm steps for plotting.
    """
    preds, gts = list(preds), list(gts)
    if not preds or len(preds) != len(gts):
        raise EmptyEvalSet("need equal-length nonempty prediction/gt lists")
    e = np.array([max_joint_error(p, g, align=align) for p, g in zip(preds, gts)])
    score = float(np.maximum(0.0, CPS_MAX_MM - np.minimum(e, CPS_MAX_MM)).mean())
    curve = (e[None, :] < CP_THRESHOLDS_MM[:, None]).mean(axis=1)
    return score, curve


def canonical_dispersion(poses, joint_indices) -> np.ndarray:
    """Per-joint positional standard deviation across a set of poses.

    For each selected joint: sqrt of the mean per-coordinate variance of its
    position over the set, in the poses' own units.
    """
    poses = np.asarray(list(poses), dtype=np.float64)
    if poses.size == 0:
        raise EmptyEvalSet("no poses")
    sel = poses[:, list(joint_indices), :]  # (n, k, 3)
    return np.sqrt(sel.var(axis=0).mean(axis=1))


@dataclass
class EvalReport:
    mpjpe: float | None  # mm, scale-adjusted, camera frame (needs gt rotations)
    pmpjpe: float  # mm, similarity-aligned
    pck150: float  # percent
    cps: float  # mm, in [0, 300]
    cp_curve: np.ndarray = field(repr=False)  # CP at 1mm thresholds
    n_poses: int = 0
    pck_alignment: str = "similarity"
    depth_flipped: bool = False

    def to_json(self) -> str:
        return json.dumps(
            {
                "mpjpe_mm": self.mpjpe,
                "pmpjpe_mm": self.pmpjpe,
                "pck150_percent": self.pck150,
                "cps_mm": self.cps,
                "n_poses": self.n_poses,
                "pck_alignment": self.pck_alignment,
                "depth_flipped": self.depth_flipped,
                "cp_curve": self.cp_curve.tolist(),
            },
            indent=2,
        )

    def save_curve_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("theta_mm,cp\n")
            for theta, value in zip(CP_THRESHOLDS_MM, self.cp_curve):
                fh.write(f"{theta:.0f},{value!r}\n")


def evaluate_poses(
    preds: list[np.ndarray],
    gts_world: list[np.ndarray],
    gts_camera: list[np.ndarray | None],
    resolve_depth_flip: bool = True,
) -> EvalReport:
    """Metrics for camera-frame predictions against ground truth.

    gts_world are the root-centered ground-truth poses (any frame works for
    the aligned metrics); gts_camera the camera-frame ground truths, or None
    per pose where the true camera rotation is unknown (then MPJPE is not
    reported). Predictions share an arbitrary global scale and, under the
    weak-perspective model, a global depth-sign gauge; with
    resolve_depth_flip the mirrored predictions are scored too and the better
    global sign is reported.
    """
    if not preds:
        raise EmptyEvalSet("no predictions")
    if not any(g is not None for g in gts_world):
        raise MissingGroundTruth("no ground-truth 3D poses in evaluation set")

    def score(flip: bool):
        mirror = np.diag([1.0, 1.0, -1.0])
        ps = [p @ mirror for p in preds] if flip else preds
        cam_errors = [
            mpjpe(p, g, scale_adjust=True)
            for p, g in zip(ps, gts_camera)
            if g is not None
        ]
        mean_mpjpe = float(np.mean(cam_errors)) if cam_errors else None
        aligned = []
        gts_for_aligned = [gc if gc is not None else gw for gc, gw in zip(gts_camera, gts_world)]
        for p, g in zip(ps, gts_for_aligned):
            a, _ = similarity_align(p, g)
            aligned.append(a)
        mean_pmpjpe = float(
            np.mean([mpjpe(a, g) for a, g in zip(aligned, gts_for_aligned)])
        )
        return ps, gts_for_aligned, aligned, mean_mpjpe, mean_pmpjpe

    ps, gts, aligned, mean_mpjpe, mean_pmpjpe = score(False)
    flipped = False
    if resolve_depth_flip:
        alt = score(True)
        better = (
            (alt[3] is not None and mean_mpjpe is not None and alt[3] < mean_mpjpe)
            if mean_mpjpe is not None
            else alt[4] < mean_pmpjpe
        )
        if better:
            ps, gts, aligned, mean_mpjpe, mean_pmpjpe = alt
            flipped = True
    pck150 = pck(aligned, gts)
    cps_value, curve = cps(ps, gts)  # aligns internally
    return EvalReport(
        mpjpe=mean_mpjpe,
        pmpjpe=mean_pmpjpe,
        pck150=pck150,
        cps=cps_value,
        cp_curve=curve,
        n_poses=len(ps),
        depth_flipped=flipped,
    )
