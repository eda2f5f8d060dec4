"""Two-branch residual lifting network.

A shared trunk (dense 3j -> 1024, leaky ReLU, one residual block) feeds two
branches of two residual blocks each: the pose branch ends in a dense layer
producing the canonical 3D pose (j x 3, root-centered and scaled to unit
Frobenius norm), the camera branch ends in a dense layer producing an
axis-angle rotation vector.

The input vector is the row-major flattening of the normalized 2D joints
(x1, y1, x2, y2, ...) concatenated with the j confidences; joint ordering is
whatever the dataset uses and must match between training and inference.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ShapeMismatch
from .geometry import Pose2D, rodrigues

HIDDEN = 1024
CHECKPOINT_VERSION = 1
_CANONICAL_NORM_FLOOR = 1e-12


def _tensor_shapes(j: int) -> list[tuple[str, tuple[int, ...]]]:
    shapes: list[tuple[str, tuple[int, ...]]] = []

    def dense(name, fan_in, fan_out):
        shapes.append((f"{name}.w", (fan_in, fan_out)))
        shapes.append((f"{name}.b", (fan_out,)))

    def block(name):
        dense(f"{name}.fc1", HIDDEN, HIDDEN)
        dense(f"{name}.fc2", HIDDEN, HIDDEN)

    dense("trunk_in", 3 * j, HIDDEN)
    block("trunk_res")
    block("pose_res1")
    block("pose_res2")
    dense("pose_out", HIDDEN, 3 * j)
    block("cam_res1")
    block("cam_res2")
    dense("cam_out", HIDDEN, 3)
    return shapes


class ModelParams:
    """All weights and biases, keyed by layer name, in a fixed declared order."""

    def __init__(self, j: int, tensors: dict[str, np.ndarray], seed: int | None = None):
        self.j = int(j)
        self.seed = seed
        expected = _tensor_shapes(self.j)
        if [(k, v.shape) for k, v in tensors.items()] != expected:
            raise ShapeMismatch("parameter tensors do not match the declared layout")
        self.tensors = {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(self.j, {k: v.copy() for k, v in self.tensors.items()}, self.seed)

    def save(self, path) -> None:
        header = {
            "format_version": CHECKPOINT_VERSION,
            "j": self.j,
            "seed": self.seed,
            "hidden": HIDDEN,
            "tensors": [{"name": k, "shape": list(v.shape)} for k, v in self.tensors.items()],
        }
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            for v in self.tensors.values():
                fh.write(v.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ModelParams":
        with open(path, "rb") as fh:
            (hlen,) = struct.unpack("<I", fh.read(4))
            header = json.loads(fh.read(hlen).decode("utf-8"))
            if header.get("format_version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
            tensors = {}
            for entry in header["tensors"]:
                shape = tuple(entry["shape"])
                n = int(np.prod(shape))
                data = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape)
                tensors[entry["name"]] = data.astype(np.float64)
        return cls(header["j"], tensors, header.get("seed"))


@dataclass(frozen=True)
class LiftOutput:
    canonical: np.ndarray  # (j, 3), root-relative, unit Frobenius norm
    rotation: np.ndarray  # (3,) axis-angle
    rotation_matrix: np.ndarray  # (3, 3)


def init_params(j: int, seed: int = 0) -> ModelParams:
    """Fan-in-scaled symmetric uniform weights, zero biases."""
    if j < 2:
        raise ValueError("joint count must be >= 2")
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in _tensor_shapes(j):
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            tensors[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(j, tensors, seed)


def zero_params(j: int) -> ModelParams:
    return ModelParams(j, {k: np.zeros(s) for k, s in _tensor_shapes(j)})


def make_param_nodes(params: ModelParams, trainable: bool = False) -> dict[str, ad.Node]:
    return {
        k: ad.parameter(v, name=k) if trainable else ad.constant(v, name=k)
        for k, v in params.tensors.items()
    }


def _dense(nodes, name, x):
    return ad.add(ad.matmul(x, nodes[f"{name}.w"]), nodes[f"{name}.b"])


def _res_block(nodes, name, x):
    h = ad.leaky_relu(_dense(nodes, name + ".fc1", x))
    h = ad.leaky_relu(_dense(nodes, name + ".fc2", h))
    return ad.add(x, h)


def forward_nodes(
    nodes: dict[str, ad.Node],
    joints2d: np.ndarray,
    confidences: np.ndarray,
    root_index: int = 0,
) -> tuple[ad.Node, ad.Node, ad.Node]:
    """Batched forward pass on already-normalized 2D inputs.

    joints2d: (B, j, 2); confidences: (B, j). Returns the canonical poses
    (B, j, 3), axis-angle vectors (B, 3) and rotation matrices (B, 3, 3).
    """
    joints2d = np.asarray(joints2d, dtype=np.float64)
    confidences = np.asarray(confidences, dtype=np.float64)
    if joints2d.ndim != 3 or joints2d.shape[2] != 2:
        raise ShapeMismatch(f"expected (B, j, 2) joints, got {joints2d.shape}")
    b, j, _ = joints2d.shape
    if confidences.shape != (b, j):
        raise ShapeMismatch(f"expected (B, j) confidences, got {confidences.shape}")
    if nodes["trunk_in.w"].shape[0] != 3 * j:
        raise ShapeMismatch(
            f"model expects j={nodes['trunk_in.w'].shape[0] // 3}, input has j={j}"
        )
    x = ad.concat([ad.constant(joints2d.reshape(b, 2 * j)), ad.constant(confidences)], axis=1)
    h = ad.leaky_relu(_dense(nodes, "trunk_in", x))
    h = _res_block(nodes, "trunk_res", h)

    p = _res_block(nodes, "pose_res1", h)
    p = _res_block(nodes, "pose_res2", p)
    raw = ad.reshape(_dense(nodes, "pose_out", p), (b, j, 3))
    centered = ad.center_rows(raw, root_index)
    norms = ad.frobenius_norm(centered, axes=(1, 2), keepdims=True, eps=_CANONICAL_NORM_FLOOR)
    canonical = ad.div(centered, norms)

    c = _res_block(nodes, "cam_res1", h)
    c = _res_block(nodes, "cam_res2", c)
    axis_angle = _dense(nodes, "cam_out", c)
    rot = ad.rodrigues_batch(axis_angle)
    return canonical, axis_angle, rot


def forward(params: ModelParams, w: Pose2D, root_index: int = 0) -> LiftOutput:
    """Single normalized observation -> canonical pose plus camera rotation."""
    nodes = make_param_nodes(params)
    canonical, axis_angle, _ = forward_nodes(
        nodes, w.joints[None], w.confidences[None], root_index
    )
    v = axis_angle.value[0]
    return LiftOutput(canonical.value[0], v, rodrigues(v))


def infer_camera_frame(params: ModelParams, w: Pose2D, root_index: int = 0) -> np.ndarray:
    """Predicted pose rotated into the observing camera's frame.

    Root at the origin and unit Frobenius norm, inherited from the canonical
    output (rotation preserves both).
    """
    out = forward(params, w, root_index)
    return out.canonical @ out.rotation_matrix.T
