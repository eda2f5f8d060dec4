"""Self-supervised training loop: Adam over the composed mixing losses.

Randomness is derived from one root seed via numpy SeedSequence spawns, in a
fixed order: (0) parameter init, (1) batch shuffling, (2) rig permutations.
Runs are bitwise deterministic for a fixed config and seed.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import MultiViewSample, batches
from .errors import NonFiniteGradient, SingleViewSample
from .geometry import normalize_pose2d
from .losses import ViewPrediction, total_loss
from .model import ModelParams, forward_nodes, init_params, make_param_nodes

logger = logging.getLogger(__name__)

ABLATION_MODES = ("none", "pose_equality", "camera_equality", "no_confidences")


@dataclass
class TrainConfig:
    epochs: int = 100
    initial_lr: float = 1e-4
    lr_decay_epochs: tuple[int, ...] = (30, 60, 90)
    lr_decay_factor: float = 0.1
    batch_size: int = 256
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_cam: float = 1.0
    static_camera_mode: bool = False
    ablation_mode: str = "none"
    # "weight decay at fixed epochs" interpreted as lr step decay; set
    # l2_weight_decay > 0 to use an L2 penalty instead of / on top of it.
    l2_weight_decay: float = 0.0
    grad_clip_norm: float | None = None
    root_index: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.initial_lr <= 0.0:
            raise ValueError("learning rate must be > 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.ablation_mode not in ABLATION_MODES:
            raise ValueError(f"unknown ablation mode {self.ablation_mode!r}")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: ModelParams) -> "AdamState":
        return cls(
            m={k: np.zeros_like(t) for k, t in params.tensors.items()},
            v={k: np.zeros_like(t) for k, t in params.tensors.items()},
        )


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    total_loss: float
    view_mixing_loss: float
    camera_consistency_loss: float
    wall_time_s: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["epoch", "lr", "total_loss", "view_mixing_loss",
                 "camera_consistency_loss", "wall_time_s"]
            )
            for r in self.records:
                writer.writerow(
                    [r.epoch, repr(r.lr), repr(r.total_loss), repr(r.view_mixing_loss),
                     repr(r.camera_consistency_loss), repr(r.wall_time_s)]
                )


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step-decayed learning rate: one decay factor per passed decay epoch."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    n = sum(1 for e in cfg.lr_decay_epochs if e <= epoch)
    return cfg.initial_lr * cfg.lr_decay_factor**n


def adam_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    cfg: TrainConfig,
) -> None:
    """Bias-corrected Adam update, in place. Aborts (no update) on non-finite
    gradients."""
    if lr <= 0.0:
        raise ValueError("learning rate must be > 0")
    for key, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in {key!r}")
    if cfg.grad_clip_norm is not None:
        norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if norm > cfg.grad_clip_norm:
            grads = {k: g * (cfg.grad_clip_norm / norm) for k, g in grads.items()}
    state.step += 1
    t = state.step
    for key, tensor in params.tensors.items():
        g = grads.get(key)
        if g is None:
            continue
        if cfg.l2_weight_decay > 0.0:
            g = g + cfg.l2_weight_decay * tensor
        state.m[key] = cfg.beta1 * state.m[key] + (1.0 - cfg.beta1) * g
        state.v[key] = cfg.beta2 * state.v[key] + (1.0 - cfg.beta2) * g * g
        m_hat = state.m[key] / (1.0 - cfg.beta1**t)
        v_hat = state.v[key] / (1.0 - cfg.beta2**t)
        tensor -= lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


def _normalized_views(batch: list[MultiViewSample], cfg: TrainConfig):
    """Normalize and stack a batch, grouped by per-sample camera count."""
    groups: dict[int, list[MultiViewSample]] = {}
    for s in batch:
        if len(s.views) < 2:
            raise SingleViewSample(f"sample {s.sample_id!r} has fewer than 2 views")
        groups.setdefault(len(s.views), []).append(s)
    out = []
    for m, members in groups.items():
        j = members[0].joint_count
        w = np.empty((len(members), m, j, 2))
        conf = np.empty((len(members), m, j))
        for i, s in enumerate(members):
            for v, (_, pose) in enumerate(s.views):
                norm = normalize_pose2d(pose, cfg.root_index)
                w[i, v] = norm.joints
                if cfg.ablation_mode == "no_confidences":
                    conf[i, v] = 1.0
                else:
                    conf[i, v] = norm.confidences
        rig_ids = [s.rig_id for s in members]
        out.append((w, conf, rig_ids))
    return out


def batch_loss(
    params: ModelParams,
    batch: list[MultiViewSample],
    cfg: TrainConfig,
    perm_rng: np.random.Generator | None,
    trainable: bool = True,
):
    """Build the loss graph for one batch.

    Returns (loss node, parameter nodes, per-term loss values).
    """
    nodes = make_param_nodes(params, trainable=trainable)
    group_losses = []
    parts_acc: dict[str, float] = {}
    n_total = len(batch)
    for w, conf, rig_ids in _normalized_views(batch, cfg):
        b, m = w.shape[0], w.shape[1]
        views = []
        for v in range(m):
            canonical, _, rot = forward_nodes(nodes, w[:, v], conf[:, v], cfg.root_index)
            views.append(ViewPrediction(canonical, rot, w[:, v], conf[:, v], f"view{v}"))
        loss, parts = total_loss(
            views,
            rig_ids=rig_ids,
            lambda_cam=cfg.lambda_cam,
            static_cameras=cfg.static_camera_mode,
            ablation=cfg.ablation_mode,
            rng=perm_rng,
        )
        # group losses are means over the group; reweight to a batch mean
        group_losses.append(ad.scale(loss, b / n_total))
        for k, val in parts.items():
            parts_acc[k] = parts_acc.get(k, 0.0) + val * b / n_total
    loss = group_losses[0]
    for extra in group_losses[1:]:
        loss = ad.add(loss, extra)
    return loss, nodes, parts_acc


def train(
    dataset: list[MultiViewSample],
    cfg: TrainConfig,
    params: ModelParams | None = None,
    checkpoint_dir=None,
    checkpoint_every: int = 0,
) -> tuple[ModelParams, TrainLog]:
    if not dataset:
        raise ValueError("dataset is empty")
    seq = np.random.SeedSequence(cfg.seed)
    init_seq, batch_seq, perm_seq = seq.spawn(3)
    if params is None:
        params = init_params(dataset[0].joint_count, seed=int(init_seq.generate_state(1)[0]))
    else:
        params = params.copy()
    state = AdamState.for_params(params)
    perm_rng = np.random.default_rng(perm_seq)
    batch_seed = int(batch_seq.generate_state(1)[0])
    log = TrainLog()
    for epoch in range(cfg.epochs):
        t0 = time.time()
        lr = lr_at(epoch, cfg)
        sums: dict[str, float] = {}
        n_batches = 0
        for batch in batches(
            dataset, cfg.batch_size, seed=batch_seed,
            rig_aware=cfg.static_camera_mode, epoch=epoch,
        ):
            loss, nodes, parts = batch_loss(params, batch, cfg, perm_rng)
            ad.backward(loss)
            grads = {k: n.grad for k, n in nodes.items() if n.grad is not None}
            try:
                adam_step(params, grads, state, lr, cfg)
            except NonFiniteGradient as exc:
                logger.warning("epoch %d: skipped step: %s", epoch, exc)
                continue
            parts.setdefault("total", float(loss.value))
            for k, val in parts.items():
                sums[k] = sums.get(k, 0.0) + val
            n_batches += 1
        denom = max(n_batches, 1)
        record = EpochRecord(
            epoch=epoch,
            lr=lr,
            total_loss=sums.get("total", sums.get("pose_equality", sums.get("camera_equality", 0.0))) / denom,
            view_mixing_loss=sums.get("view_mixing", 0.0) / denom,
            camera_consistency_loss=sums.get("camera_consistency", 0.0) / denom,
            wall_time_s=time.time() - t0,
        )
        log.records.append(record)
        logger.info(
            "epoch %d: lr=%.2e loss=%.6f (mixing=%.6f cam=%.6f) %.1fs",
            epoch, lr, record.total_loss, record.view_mixing_loss,
            record.camera_consistency_loss, record.wall_time_s,
        )
        if checkpoint_dir is not None and checkpoint_every > 0 and (epoch + 1) % checkpoint_every == 0:
            params.save(f"{checkpoint_dir}/checkpoint_epoch{epoch + 1:04d}.bin")
    return params, log
