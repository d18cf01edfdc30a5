"""Training objectives and evaluation metrics.

Losses take batched tensors ``(B, P, d)``. Each returns one value per
sample: the sum over points of the per-point L1 norm, divided by the point
count. :func:`total_loss` combines them and averages over the batch.

Metrics work on plain arrays and report in the units of their inputs
(millimetres for the evaluation harness).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numeric as nm
from .errors import ConfigError, DimensionError, NumericError
from .numeric import Tensor, svd3


@dataclass(frozen=True)
class GroundTruth:
    """Targets for one sample: fine vertices (M, 3), joints (K, 3), 2D joints (K, 2)."""

    vertices3d: np.ndarray
    joints3d: np.ndarray
    joints2d: np.ndarray

    def __post_init__(self):
        for name, width in (("vertices3d", 3), ("joints3d", 3), ("joints2d", 2)):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 2 or arr.shape[1] != width:
                raise DimensionError(f"{name} must be (n, {width}), got {arr.shape}")
            if not np.isfinite(arr).all():
                raise NumericError(f"{name} contains non-finite values")
            object.__setattr__(self, name, arr)
        if self.joints3d.shape[0] != self.joints2d.shape[0]:
            raise DimensionError(f"{self.joints3d.shape[0]} 3D joints vs {self.joints2d.shape[0]} 2D joints")


@dataclass(frozen=True)
class LossWeights:
    vertex3d: float = 100.0
    joint3d: float = 1000.0
    joint2d: float = 100.0

    def __post_init__(self):
        for name in ("vertex3d", "joint3d", "joint2d"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be non-negative")


@dataclass
class LossParts:
    vertex3d: Tensor
    joint3d: Tensor
    joint2d: Tensor


def loss_vertex(pred_fine, gt) -> Tensor:
    return nm.l1_mean(pred_fine, gt)


def loss_joint(pred_joints, regressed_joints, gt) -> Tensor:
    return nm.l1_mean(pred_joints, gt) + nm.l1_mean(regressed_joints, gt)


def loss_joint2d(pred2d, regressed2d, gt2d) -> Tensor:
    return nm.l1_mean(pred2d, gt2d) + nm.l1_mean(regressed2d, gt2d)


def _flags(value, batch_shape) -> np.ndarray:
    arr = np.broadcast_to(np.asarray(value, dtype=np.float64), batch_shape)
    if not np.isin(arr, (0.0, 1.0)).all():
        raise ConfigError("availability flags must be 0 or 1")
    return arr


def total_loss(parts: LossParts, weights: LossWeights = LossWeights(), alpha=1, beta=1) -> Tensor:
    """``alpha*(w_v*L_v + w_j*L_j) + beta*w_2d*L_2d``, averaged over samples.

    ``alpha`` / ``beta`` are 0/1 flags, scalar or one per sample, marking
    whether 3D / 2D ground truth is available.
    """
    v, j, j2 = (nm.as_tensor(p) for p in (parts.vertex3d, parts.joint3d, parts.joint2d))
    a = _flags(alpha, v.shape)
    b = _flags(beta, v.shape)
    # weights folded into per-sample constants so a zero flag removes its term exactly
    per_sample = v * (a * weights.vertex3d) + j * (a * weights.joint3d) + j2 * (b * weights.joint2d)
    return nm.mean(per_sample) if per_sample.ndim else per_sample


def compute_losses(output, vertices3d, joints3d, joints2d) -> LossParts:
    """Loss terms of a :class:`~fastmetro.model.ModelOutput` against ground truth."""
    return LossParts(
        loss_vertex(output.fine_vertices3d, vertices3d),
        loss_joint(output.joints3d, output.regressed_joints3d, joints3d),
        loss_joint2d(output.joints2d, output.regressed_joints2d, joints2d),
    )


# -- metrics -----------------------------------------------------------------------

def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    return pred, gt


def procrustes_align(pred, gt) -> np.ndarray:
    """Best similarity transform ``s*R*p + t`` of ``pred`` onto ``gt`` (R a proper rotation)."""
    pred, gt = _pair(pred, gt)
    if pred.ndim != 2 or pred.shape[1] != 3 or pred.shape[0] < 3:
        raise DimensionError(f"procrustes_align needs (K>=3, 3) points, got {pred.shape}")
    mu_p, mu_g = pred.mean(axis=0), gt.mean(axis=0)
    x, y = pred - mu_p, gt - mu_g
    var_x = (x * x).sum()
    if (y * y).sum() == 0.0:
        raise NumericError("procrustes_align: ground truth points all coincide")
    if var_x == 0.0:
        raise NumericError("procrustes_align: predicted points all coincide")
    u, s, v = svd3(x.T @ y)
    d = np.ones(3)
    d[2] = np.sign(np.linalg.det(v @ u.T)) or 1.0
    rot = (v * d) @ u.T
    scale = (s * d).sum() / var_x
    return scale * x @ rot.T + mu_g


def mpjpe(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    return float(np.linalg.norm(pred - gt, axis=-1).mean())


def pa_mpjpe(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    return mpjpe(procrustes_align(pred, gt), gt)


def mpvpe(pred, gt) -> float:
    return mpjpe(pred, gt)


METRIC_COLUMNS = ("sample_id", "mpjpe", "pa_mpjpe", "mpvpe")


def write_report(path, rows) -> None:
    """Write evaluation rows (dicts keyed by :data:`METRIC_COLUMNS`) as CSV."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(float(row[k])) if k != "sample_id" else row[k]) for k in METRIC_COLUMNS})
