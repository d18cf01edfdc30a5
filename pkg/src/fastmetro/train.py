"""Optimiser, gradient clipping, the training loop and checkpoints."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import blockio
from . import losses as L
from .data import SyntheticDataset
from .errors import ConfigError, DataError, NumericError, TrainingError
from .model import FastMETRO, ModelConfig
from .numeric import Tensor, no_grad

CHECKPOINT_MAGIC = b"FMETROCK"

LOG_COLUMNS = ("epoch", "loss_total", "loss_vertex", "loss_joint", "loss_joint2d",
               "grad_norm", "mpjpe", "pa_mpjpe", "mpvpe")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip_norm: float = 0.3
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0
    holdout: int = 0
    alpha: int = 1
    beta: int = 1

    def __post_init__(self):
        for name in ("learning_rate", "adam_eps", "grad_clip_norm"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        for name in ("beta1", "beta2"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        if self.holdout < 0 or self.seed < 0:
            raise ConfigError("holdout and seed must be non-negative")
        if self.alpha not in (0, 1) or self.beta not in (0, 1):
            raise ConfigError("alpha and beta are 0/1 availability flags")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown training config keys: {unknown}")
        return cls(**data)


# -- optimiser ------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
               config: TrainConfig) -> tuple[dict[str, np.ndarray], AdamState]:
    """One AdamW update; returns new parameter arrays and the advanced state.

    Weight decay is decoupled: ``p -= lr * wd * p`` acts on the weights
    directly, never through the moment estimates. Nothing is modified when
    any gradient is non-finite.
    """
    if set(params) != set(grads):
        raise ConfigError("parameters and gradients have different names")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ConfigError(f"gradient {name}: shape {g.shape} vs parameter {params[name].shape}")
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for {name}; step aborted")
    lr, b1, b2 = config.learning_rate, config.beta1, config.beta2
    step = state.step + 1
    corr1, corr2 = 1.0 - b1 ** step, 1.0 - b2 ** step
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * g * g
        decayed = p - lr * config.weight_decay * p
        new_params[name] = decayed - lr * (m / corr1) / (np.sqrt(v / corr2) + config.adam_eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(step, new_m, new_v)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float = 0.3) -> tuple[dict[str, np.ndarray], float]:
    """Rescale so the global L2 norm is at most ``max_norm``; returns (grads, original norm)."""
    if not max_norm > 0:
        raise ConfigError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads, norm
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}, norm


# -- checkpoints -------------------------------------------------------------------------

def save_checkpoint(path, model: FastMETRO, state: AdamState | None = None,
                    train_config: TrainConfig | None = None, extra: dict | None = None) -> None:
    meta = {"model_config": model.config.to_dict(),
            "train_config": train_config.to_dict() if train_config else None,
            "optimizer_step": state.step if state else None,
            "extra": extra or {}}
    blocks = {f"param/{k}": v for k, v in model.state_dict().items()}
    if state is not None:
        for name in state.m:
            blocks[f"optim/m/{name}"] = state.m[name]
            blocks[f"optim/v/{name}"] = state.v[name]
    blockio.write(path, CHECKPOINT_MAGIC, meta, blocks)


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    state: AdamState | None
    train_config: TrainConfig | None
    extra: dict


def read_checkpoint(path) -> Checkpoint:
    meta, blocks = blockio.read(path, CHECKPOINT_MAGIC)
    try:
        cfg = ModelConfig.from_dict(meta["model_config"])
        tcfg = TrainConfig.from_dict(meta["train_config"]) if meta.get("train_config") else None
    except (KeyError, TypeError, ConfigError) as exc:
        raise DataError(f"{path}: invalid configuration echo ({exc})") from None
    params = {k[len("param/"):]: v for k, v in blocks.items() if k.startswith("param/")}
    state = None
    if meta.get("optimizer_step") is not None:
        m = {k[len("optim/m/"):]: v for k, v in blocks.items() if k.startswith("optim/m/")}
        v = {k[len("optim/v/"):]: v for k, v in blocks.items() if k.startswith("optim/v/")}
        if set(m) != set(v):
            raise DataError(f"{path}: optimizer moments are incomplete")
        state = AdamState(int(meta["optimizer_step"]), m, v)
    return Checkpoint(cfg, params, state, tcfg, meta.get("extra") or {})


def load_checkpoint(path, model: FastMETRO) -> Checkpoint:
    """Load weights into ``model``; the stored config must match the model's exactly."""
    ckpt = read_checkpoint(path)
    if ckpt.model_config != model.config:
        theirs, ours = ckpt.model_config.to_dict(), model.config.to_dict()
        diff = sorted(k for k in ours if ours[k] != theirs[k])
        raise DataError(f"{path}: checkpoint config differs from the model in {diff}")
    try:
        model.load_state_dict(ckpt.params)
    except (ConfigError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from None
    return ckpt


# -- training -----------------------------------------------------------------------------

def _batch_tensors(arrays: dict[str, np.ndarray]):
    return (Tensor(arrays["images"]), Tensor(arrays["vertices3d"]), Tensor(arrays["joints3d"]),
            Tensor(arrays["joints2d"]))


def evaluate(model: FastMETRO, dataset: SyntheticDataset, batch_size: int = 32) -> list[dict]:
    """Per-sample MPJPE / PA-MPJPE (on mesh-regressed joints) and MPVPE."""
    rows = []
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            idx = list(range(start, min(start + batch_size, len(dataset))))
            arrays = dataset.arrays(idx)
            out = model(Tensor(arrays["images"]))
            for b, i in enumerate(idx):
                joints = out.regressed_joints3d.data[b]
                gt_j = arrays["joints3d"][b]
                rows.append({"sample_id": i, "mpjpe": L.mpjpe(joints, gt_j), "pa_mpjpe": L.pa_mpjpe(joints, gt_j),
                             "mpvpe": L.mpvpe(out.fine_vertices3d.data[b], arrays["vertices3d"][b])})
    return rows


def summarize(rows: list[dict]) -> dict[str, float]:
    return {k: float(np.mean([r[k] for r in rows])) for k in ("mpjpe", "pa_mpjpe", "mpvpe")}


@dataclass
class Trainer:
    """Owns a model and its optimiser state for step-by-step training."""

    model: FastMETRO
    config: TrainConfig
    state: AdamState = field(default_factory=AdamState)

    def loss(self, arrays: dict[str, np.ndarray]) -> tuple[Tensor, L.LossParts]:
        images, v, j, j2 = _batch_tensors(arrays)
        parts = L.compute_losses(self.model(images), v, j, j2)
        return L.total_loss(parts, alpha=self.config.alpha, beta=self.config.beta), parts

    def step(self, arrays: dict[str, np.ndarray], dump_path=None) -> tuple[float, L.LossParts, float]:
        """Forward, backward, clip, update. Returns (loss, parts, pre-clip gradient norm)."""
        named = dict(self.model.named_parameters())
        self.model.zero_grad()
        try:
            total, parts = self.loss(arrays)
            if not np.isfinite(total.data).all():
                raise NumericError("non-finite total loss")
            total.backward()
        except NumericError as exc:
            where = ""
            if dump_path is not None:
                blockio.write(dump_path, b"FMBADBAT", {"error": str(exc)}, arrays)
                where = f"; offending batch written to {dump_path}"
            raise TrainingError(f"training aborted at optimizer step {self.state.step + 1}: {exc}{where}") from exc
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in named.items()}
        grads, norm = clip_gradients(grads, self.config.grad_clip_norm)
        params = {k: p.data for k, p in named.items()}
        new_params, self.state = adamw_step(params, grads, self.state, self.config)
        for k, p in named.items():
            p.data = new_params[k]
        return total.item(), parts, norm


@dataclass
class TrainResult:
    log: list[dict]
    best_epoch: int
    best_pa_mpjpe: float
    trainer: Trainer


def train(model: FastMETRO, dataset: SyntheticDataset, config: TrainConfig, eval_set: SyntheticDataset | None = None,
          log_path=None, checkpoint_path=None, dump_dir=None) -> TrainResult:
    """Mini-batch training with per-epoch logging.

    Batches are drawn from a fresh seeded permutation each epoch. Metrics
    are computed on ``eval_set`` (the training set itself when omitted)
    after every epoch, and the best-by-PA-MPJPE weights are checkpointed.
    """
    if dataset.topology.num_joints != model.config.num_joints or \
            dataset.topology.num_fine_vertices != model.config.num_fine_vertices or \
            tuple(dataset.image_size) != model.config.image_size:
        raise ConfigError("dataset topology / image size do not match the model config")
    trainer = Trainer(model, config)
    rng = np.random.default_rng(config.seed)
    eval_set = eval_set if eval_set is not None else dataset
    log: list[dict] = []
    best_epoch, best = 0, math.inf
    writer = fh = None
    if log_path is not None:
        fh = Path(log_path).open("w", newline="", encoding="utf-8")
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        writer.writeheader()
    dump = Path(dump_dir) / "failed_batch.bin" if dump_dir is not None else None
    try:
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(len(dataset))
            sums = dict.fromkeys(("loss_total", "loss_vertex", "loss_joint", "loss_joint2d"), 0.0)
            max_norm = 0.0
            for start in range(0, len(order), config.batch_size):
                idx = order[start:start + config.batch_size]
                loss, parts, norm = trainer.step(dataset.arrays(idx), dump)
                n = len(idx)
                sums["loss_total"] += loss * n
                sums["loss_vertex"] += float(parts.vertex3d.data.sum())
                sums["loss_joint"] += float(parts.joint3d.data.sum())
                sums["loss_joint2d"] += float(parts.joint2d.data.sum())
                max_norm = max(max_norm, norm)
            row = {"epoch": epoch, **{k: v / len(dataset) for k, v in sums.items()}, "grad_norm": max_norm}
            row.update(summarize(evaluate(model, eval_set)))
            log.append(row)
            if writer is not None:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
                fh.flush()
            if row["pa_mpjpe"] < best:
                best, best_epoch = row["pa_mpjpe"], epoch
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, model, trainer.state, config,
                                    {"epoch": epoch, "pa_mpjpe": best})
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(log, best_epoch, best, trainer)
