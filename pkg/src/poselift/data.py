"""Dataset ingestion, batching and the synthetic multi-view generator.

Dataset file format: JSON Lines, one multi-view sample per line:

    {"sample_id": "s0", "rig_id": "rig0",
     "views": [{"camera_id": "cam0", "keypoints": [[x, y], ...],
                "confidences": [c, ...],
                "rotation": [[...], [...], [...]]  # optional, ground truth
               }, ...],
     "gt3d": [[x, y, z], ...]}  # optional, millimetres, root-centered

The per-view "rotation" field carries the ground-truth camera rotation where
known (synthetic data); it enables camera-frame evaluation and is ignored by
training.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DuplicateCameraInSample,
    InconsistentJointCount,
    ParseError,
)
from .geometry import Pose2D, project_weak_perspective, rodrigues

logger = logging.getLogger(__name__)


@dataclass
class MultiViewSample:
    sample_id: str
    rig_id: str
    views: list[tuple[str, Pose2D]]  # (camera_id, observation in pixels)
    gt3d: np.ndarray | None = None  # (j, 3) mm, root-centered
    gt_rotations: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.views:
            raise ValueError(f"sample {self.sample_id!r} has no views")
        cams = [c for c, _ in self.views]
        if len(set(cams)) != len(cams):
            raise DuplicateCameraInSample(
                f"sample {self.sample_id!r} repeats a camera id"
            )
        counts = {p.joint_count for _, p in self.views}
        if len(counts) != 1:
            raise InconsistentJointCount(
                f"sample {self.sample_id!r} mixes joint counts {sorted(counts)}"
            )

    @property
    def joint_count(self) -> int:
        return self.views[0][1].joint_count


def _parse_sample(obj: dict, line_no: int) -> MultiViewSample:
    def require(key, container, where):
        if key not in container:
            raise ParseError(f"line {line_no}: missing field {key!r} in {where}")
        return container[key]

    sample_id = str(require("sample_id", obj, "sample"))
    rig_id = str(require("rig_id", obj, "sample"))
    views = []
    rotations = {}
    clamped = 0
    for view in require("views", obj, "sample"):
        cam = str(require("camera_id", view, "view"))
        kp = np.asarray(require("keypoints", view, "view"), dtype=np.float64)
        conf = np.asarray(require("confidences", view, "view"), dtype=np.float64)
        low, high = conf.min(initial=0.0), conf.max(initial=1.0)
        if low < 0.0 or high > 1.0:
            clamped += int(((conf < 0.0) | (conf > 1.0)).sum())
            conf = np.clip(conf, 0.0, 1.0)
        try:
            pose = Pose2D(kp, conf)
        except Exception as exc:
            raise ParseError(f"line {line_no}: bad view {cam!r}: {exc}") from exc
        views.append((cam, pose))
        if "rotation" in view:
            rotations[cam] = np.asarray(view["rotation"], dtype=np.float64)
    gt3d = None
    if obj.get("gt3d") is not None:
        gt3d = np.asarray(obj["gt3d"], dtype=np.float64)
    if clamped:
        logger.warning("line %d: clamped %d confidences to [0, 1]", line_no, clamped)
    try:
        return MultiViewSample(sample_id, rig_id, views, gt3d, rotations)
    except (DuplicateCameraInSample, InconsistentJointCount):
        raise
    except Exception as exc:
        raise ParseError(f"line {line_no}: {exc}") from exc


def load_dataset(path) -> list[MultiViewSample]:
    samples: list[MultiViewSample] = []
    joint_count = None
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"line {line_no}: invalid JSON: {exc}") from exc
            sample = _parse_sample(obj, line_no)
            if joint_count is None:
                joint_count = sample.joint_count
            elif sample.joint_count != joint_count:
                raise InconsistentJointCount(
                    f"line {line_no}: j={sample.joint_count}, dataset has j={joint_count}"
                )
            samples.append(sample)
    return samples


def _sample_to_obj(s: MultiViewSample) -> dict:
    obj = {
        "sample_id": s.sample_id,
        "rig_id": s.rig_id,
        "views": [],
    }
    for cam, pose in s.views:
        view = {
            "camera_id": cam,
            "keypoints": pose.joints.tolist(),
            "confidences": pose.confidences.tolist(),
        }
        if cam in s.gt_rotations:
            view["rotation"] = s.gt_rotations[cam].tolist()
        obj["views"].append(view)
    if s.gt3d is not None:
        obj["gt3d"] = s.gt3d.tolist()
    return obj


def save_dataset(samples: list[MultiViewSample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(_sample_to_obj(s)) + "\n")


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------

# 17-joint kinematic tree, pelvis-rooted. Offsets are resting bone vectors in
# mm (y up); per-bone max perturbation angles in radians give articulation.
_TREE_PARENTS = [-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15]
_TREE_OFFSETS = np.array(
    [
        [0.0, 0.0, 0.0],  # 0 pelvis
        [-132.0, 0.0, 0.0],  # 1 right hip
        [0.0, -442.0, 0.0],  # 2 right knee
        [0.0, -454.0, 0.0],  # 3 right ankle
        [132.0, 0.0, 0.0],  # 4 left hip
        [0.0, -442.0, 0.0],  # 5 left knee
        [0.0, -454.0, 0.0],  # 6 left ankle
        [0.0, 233.0, 0.0],  # 7 spine
        [0.0, 257.0, 0.0],  # 8 thorax
        [0.0, 121.0, 0.0],  # 9 neck
        [0.0, 115.0, 0.0],  # 10 head
        [150.0, 0.0, 0.0],  # 11 left shoulder
        [0.0, -279.0, 0.0],  # 12 left elbow
        [0.0, -251.0, 0.0],  # 13 left wrist
        [-150.0, 0.0, 0.0],  # 14 right shoulder
        [0.0, -279.0, 0.0],  # 15 right elbow
        [0.0, -251.0, 0.0],  # 16 right wrist
    ]
)
_TREE_MAX_ANGLE = np.array(
    [0.0, 0.3, 1.0, 0.8, 0.3, 1.0, 0.8, 0.25, 0.25, 0.3, 0.3, 0.4, 1.2, 1.0, 0.4, 1.2, 1.0]
)
HIP_JOINTS = (1, 4)
ROOT_JOINT = 0


@dataclass
class SynthConfig:
    num_samples: int = 1000
    num_cameras: int = 4
    joint_count: int = 17
    camera_mode: str = "static"  # "static" (fixed rig) or "moving" (per sample)
    num_rigs: int = 1
    noise_std: float = 0.0  # per-coordinate, in normalized units
    occlusion_prob: float = 0.0
    occlusion_noise_std: float = 0.15
    confidence_delta: float = 1e-6
    elevation_range_deg: float = 30.0
    pixel_scale: float = 400.0
    pixel_center: tuple[float, float] = (640.0, 360.0)
    angle_scale: float = 1.0  # multiplies the per-bone articulation ranges
    seed: int = 0

    def __post_init__(self):
        if self.num_cameras < 2:
            raise ValueError("need at least 2 cameras")
        if self.noise_std < 0.0:
            raise ValueError("noise_std must be >= 0")
        if self.camera_mode not in ("static", "moving"):
            raise ValueError(f"unknown camera mode {self.camera_mode!r}")


@dataclass
class GroundTruth:
    pose3d: np.ndarray  # (j, 3) mm, root-centered
    rotations: dict[str, np.ndarray]  # camera_id -> (3, 3)


def _chain_tree(j: int, rng: np.random.Generator):
    """Fallback articulated chain for joint counts without a human tree."""
    parents = [-1] + list(range(j - 1))
    directions = rng.normal(size=(j, 3))
    directions[0] = 0.0
    norms = np.linalg.norm(directions[1:], axis=1, keepdims=True)
    offsets = np.zeros((j, 3))
    offsets[1:] = directions[1:] / norms * (1700.0 / max(j - 1, 1))
    max_angle = np.full(j, 0.6)
    max_angle[0] = 0.0
    return parents, offsets, max_angle


def _random_pose(cfg: SynthConfig, rng: np.random.Generator, tree) -> np.ndarray:
    parents, offsets, max_angle = tree
    j = len(parents)
    pos = np.zeros((j, 3))
    rot = [np.eye(3)] * j
    for i in range(1, j):
        angle = rng.uniform(0.0, max_angle[i] * cfg.angle_scale)
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        local = rodrigues(angle * axis)
        rot[i] = rot[parents[i]] @ local
        pos[i] = pos[parents[i]] + rot[i] @ offsets[i]
    return pos - pos[ROOT_JOINT]


def _random_camera(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    azimuth = rng.uniform(0.0, 2.0 * np.pi)
    elevation = np.deg2rad(rng.uniform(-cfg.elevation_range_deg, cfg.elevation_range_deg))
    roll = np.deg2rad(rng.uniform(-10.0, 10.0))
    return (
        rodrigues([0.0, 0.0, roll])
        @ rodrigues([elevation, 0.0, 0.0])
        @ rodrigues([0.0, azimuth, 0.0])
    )


def generate_synthetic(
    cfg: SynthConfig,
) -> tuple[list[MultiViewSample], dict[str, GroundTruth]]:
    """Sample articulated poses, camera rotations and noisy 2D observations.

    Observations follow the weak-perspective model: the root-centered pose is
    rotated per camera, the depth dropped, the result scaled to unit
    Frobenius norm; noise and occlusion corruption are added in that
    normalized frame, confidences reflect the actual corruption, and the
    result is emitted in a synthetic pixel frame.
    """
    seq = np.random.SeedSequence(cfg.seed)
    pose_rng, cam_rng, noise_rng = (np.random.default_rng(s) for s in seq.spawn(3))
    if cfg.joint_count == 17:
        tree = (_TREE_PARENTS, _TREE_OFFSETS, _TREE_MAX_ANGLE)
    else:
        tree = _chain_tree(cfg.joint_count, np.random.default_rng(seq.spawn(1)[0]))
    cam_ids = [f"cam{v}" for v in range(cfg.num_cameras)]
    rig_cameras = {}
    if cfg.camera_mode == "static":
        for r in range(cfg.num_rigs):
            rig_cameras[f"rig{r}"] = [_random_camera(cfg, cam_rng) for _ in cam_ids]

    samples = []
    gt: dict[str, GroundTruth] = {}
    scale = 3.0 * cfg.noise_std + cfg.confidence_delta
    for s in range(cfg.num_samples):
        sample_id = f"s{s:06d}"
        if cfg.camera_mode == "static":
            rig_id = f"rig{s % cfg.num_rigs}"
            rotations = rig_cameras[rig_id]
        else:
            rig_id = f"rig-{sample_id}"
            rotations = [_random_camera(cfg, cam_rng) for _ in cam_ids]
        pose = _random_pose(cfg, pose_rng, tree)
        views = []
        rot_map = {}
        for cam_id, rot in zip(cam_ids, rotations):
            proj = project_weak_perspective(rot, pose)
            norm = proj / np.linalg.norm(proj)
            eps = noise_rng.normal(0.0, cfg.noise_std, size=norm.shape)
            if cfg.occlusion_prob > 0.0:
                occluded = noise_rng.random(cfg.joint_count) < cfg.occlusion_prob
                eps[occluded] += noise_rng.normal(
                    0.0, cfg.occlusion_noise_std, size=(int(occluded.sum()), 2)
                )
            noisy = norm + eps
            err = np.linalg.norm(eps, axis=1)
            conf = np.clip(1.0 - err / scale, 0.0, 1.0)
            pixels = cfg.pixel_scale * noisy + np.asarray(cfg.pixel_center)
            views.append((cam_id, Pose2D(pixels, conf)))
            rot_map[cam_id] = rot
        samples.append(MultiViewSample(sample_id, rig_id, views, pose, rot_map))
        gt[sample_id] = GroundTruth(pose, rot_map)
    return samples, gt


def save_ground_truth(gt: dict[str, GroundTruth], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sample_id, entry in gt.items():
            obj = {
                "sample_id": sample_id,
                "pose3d": entry.pose3d.tolist(),
                "rotations": {k: v.tolist() for k, v in entry.rotations.items()},
            }
            fh.write(json.dumps(obj) + "\n")


def load_ground_truth(path) -> dict[str, GroundTruth]:
    gt = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            gt[obj["sample_id"]] = GroundTruth(
                np.asarray(obj["pose3d"], dtype=np.float64),
                {k: np.asarray(v, dtype=np.float64) for k, v in obj["rotations"].items()},
            )
    return gt


def batches(
    dataset: list[MultiViewSample],
    batch_size: int,
    seed: int = 0,
    rig_aware: bool = False,
    epoch: int = 0,
) -> list[list[MultiViewSample]]:
    """Shuffled batches for one epoch, deterministic in (seed, epoch).

    With rig_aware=True samples are shuffled within rigs and rigs kept
    contiguous, so batches contain as many same-rig pairs as possible;
    singleton-rig samples still appear and camera-consistency terms for them
    are skipped by the loss.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(epoch,)))
    if rig_aware:
        groups: dict[str, list[MultiViewSample]] = {}
        for s in dataset:
            groups.setdefault(s.rig_id, []).append(s)
        order = []
        rig_keys = list(groups)
        rng.shuffle(rig_keys)
        for key in rig_keys:
            members = groups[key][:]
            rng.shuffle(members)
            order.extend(members)
    else:
        order = dataset[:]
        rng.shuffle(order)
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
