"""The encoder-decoder mesh regressor.

Data flow for a batch of images ``(B, H_img, W_img, ch)``::

    toy backbone -> (B, H, W, C) -> 1x1 projection + sine encoding -> (B, HW, D1)
    for each stage:
        encoder over [camera token; image features]   -> camera feature, X_A
        decoder over [joint tokens; vertex tokens], cross-attending to X_A
        linear reduction to the next stage width
    linear heads -> joints (K), coarse vertices (N), camera (s, t)
    fine vertices = U @ coarse,  regressed joints = R @ fine

Layers are post-norm (residual, then LayerNorm). Dropout is not used.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Iterator

import numpy as np

from . import numeric as nm
from .errors import ConfigError, DimensionError
from .mesh import AttentionMask, Topology, build_attention_mask, sparse_dense_matmul
from .numeric import Tensor

MASK_MODES = ("full", "half_heads", "off")
POSITIONAL_ENCODINGS = ("fixed_sine", "learned", "none")

# Fixed 3x2 orthographic selector: keeps x and y, drops z.
ORTHOGRAPHIC = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])

# Layer counts per stage for the published size variants; widths are (512, 128).
VARIANT_LAYERS = {"S": (1, 1), "M": (2, 2), "L": (3, 3)}


@dataclass(frozen=True)
class ModelConfig:
    stage_dims: tuple[int, ...] = (512, 128)
    enc_layers: tuple[int, ...] = (1, 1)
    dec_layers: tuple[int, ...] = (1, 1)
    num_heads: int = 8
    mlp_expansion: int = 4
    num_joints: int = 14
    num_vertices: int = 431
    num_fine_vertices: int = 6890
    feature_grid: tuple[int, int] = (7, 7)
    backbone_channels: int = 2048
    backbone_hidden: int = 256
    image_size: tuple[int, int] = (56, 56)
    image_channels: int = 1
    mask_mode: str = "full"
    positional_encoding: str = "fixed_sine"
    pe_temperature: float = 10000.0
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        for name in ("stage_dims", "enc_layers", "dec_layers", "feature_grid", "image_size"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        dims = self.stage_dims
        if not dims:
            raise ConfigError("at least one stage is required")
        if any(b >= a for a, b in zip(dims, dims[1:])):
            raise ConfigError(f"stage_dims must be strictly decreasing, got {dims}")
        if len(self.enc_layers) != len(dims) or len(self.dec_layers) != len(dims):
            raise ConfigError("enc_layers / dec_layers need one entry per stage")
        if any(n < 0 for n in self.enc_layers + self.dec_layers):
            raise ConfigError("layer counts must be non-negative")
        if self.num_heads < 1 or any(d % self.num_heads for d in dims):
            raise ConfigError(f"every stage width must be divisible by num_heads={self.num_heads}")
        if dims[0] % 2:
            raise ConfigError("the first stage width must be even for the sine encoding")
        if self.mask_mode not in MASK_MODES:
            raise ConfigError(f"mask_mode must be one of {MASK_MODES}, got {self.mask_mode!r}")
        if self.mask_mode == "half_heads" and self.num_heads % 2:
            raise ConfigError("half_heads masking needs an even number of heads")
        if self.positional_encoding not in POSITIONAL_ENCODINGS:
            raise ConfigError(f"positional_encoding must be one of {POSITIONAL_ENCODINGS}")
        for name in ("mlp_expansion", "num_joints", "num_vertices", "num_fine_vertices",
                     "backbone_channels", "backbone_hidden", "image_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        (h, w), (hi, wi) = self.feature_grid, self.image_size
        if min(h, w) < 1 or hi % h or wi % w:
            raise ConfigError(f"image {self.image_size} is not divisible into a {self.feature_grid} grid")

    @classmethod
    def variant(cls, name: str, **overrides) -> "ModelConfig":
        key = name.upper().removeprefix("FASTMETRO-")
        if key not in VARIANT_LAYERS:
            raise ConfigError(f"unknown variant {name!r}; expected one of S, M, L")
        layers = VARIANT_LAYERS[key]
        return cls(**{"stage_dims": (512, 128), "enc_layers": layers, "dec_layers": layers, **overrides})

    @property
    def patch_size(self) -> tuple[int, int]:
        return (self.image_size[0] // self.feature_grid[0], self.image_size[1] // self.feature_grid[1])

    @property
    def num_tokens(self) -> int:
        return self.num_joints + self.num_vertices

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {unknown}")
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def with_topology(self, topology: Topology) -> "ModelConfig":
        return replace(self, num_joints=topology.num_joints, num_vertices=topology.num_vertices,
                       num_fine_vertices=topology.num_fine_vertices)


# -- building blocks -----------------------------------------------------------

def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Parameter container; parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing, extra = sorted(set(own) - set(state)), sorted(set(state) - set(own))
            raise ConfigError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise DimensionError(f"parameter {name}: expected {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype, copy=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.weight = Tensor(xavier_uniform(rng, d_in, d_out, (d_in, d_out)), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x):
        return nm.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.shift = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x):
        return nm.layer_norm(x, self.gain, self.shift, self.eps)


class MLP(Module):
    """Two linear layers with a ReLU in between."""

    def __init__(self, dim: int, hidden: int, rng):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x):
        return self.fc2(nm.relu(self.fc1(x)))


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng):
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def __call__(self, query: Tensor, memory: Tensor, mask=None, maps: list | None = None) -> Tensor:
        b, lq, d = query.shape
        lk = memory.shape[1]
        h = self.heads
        dh = d // h
        q = nm.transpose(nm.reshape(self.q(query), (b, lq, h, dh)), (0, 2, 1, 3))
        k = nm.transpose(nm.reshape(self.k(memory), (b, lk, h, dh)), (0, 2, 3, 1))
        v = nm.transpose(nm.reshape(self.v(memory), (b, lk, h, dh)), (0, 2, 1, 3))
        probs = nm.masked_softmax(nm.matmul(q, k) * (1.0 / math.sqrt(dh)), mask)
        if maps is not None:
            maps.append(probs.data)
        ctx = nm.reshape(nm.transpose(nm.matmul(probs, v), (0, 2, 1, 3)), (b, lq, d))
        return self.out(ctx)


class EncoderLayer(Module):
    def __init__(self, dim: int, heads: int, hidden: int, eps: float, rng):
        self.self_attn = MultiHeadAttention(dim, heads, rng)
        self.norm1 = LayerNorm(dim, eps)
        self.mlp = MLP(dim, hidden, rng)
        self.norm2 = LayerNorm(dim, eps)

    def __call__(self, x, maps=None):
        x = self.norm1(x + self.self_attn(x, x, None, maps))
        return self.norm2(x + self.mlp(x))


class DecoderLayer(Module):
    def __init__(self, dim: int, heads: int, hidden: int, eps: float, rng):
        self.self_attn = MultiHeadAttention(dim, heads, rng)
        self.norm1 = LayerNorm(dim, eps)
        self.cross_attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim, eps)
        self.mlp = MLP(dim, hidden, rng)
        self.norm3 = LayerNorm(dim, eps)

    def __call__(self, tokens, memory, mask=None, self_maps=None, cross_maps=None):
        tokens = self.norm1(tokens + self.self_attn(tokens, tokens, mask, self_maps))
        tokens = self.norm2(tokens + self.cross_attn(tokens, memory, None, cross_maps))
        return self.norm3(tokens + self.mlp(tokens))


class Stage(Module):
    def __init__(self, dim: int, n_enc: int, n_dec: int, cfg: ModelConfig, rng):
        hidden = cfg.mlp_expansion * dim
        self.encoder = [EncoderLayer(dim, cfg.num_heads, hidden, cfg.layer_norm_eps, rng) for _ in range(n_enc)]
        self.decoder = [DecoderLayer(dim, cfg.num_heads, hidden, cfg.layer_norm_eps, rng) for _ in range(n_dec)]


class Reduction(Module):
    """Width reduction between stages: one projection each for the camera
    feature, the image features, and the (shared) joint/vertex tokens."""

    def __init__(self, d_in: int, d_out: int, rng):
        self.cam = Linear(d_in, d_out, rng)
        self.image = Linear(d_in, d_out, rng)
        self.tokens = Linear(d_in, d_out, rng)


class ToyBackbone(Module):
    """Patch embedding standing in for a CNN: two linear+ReLU stages per patch."""

    def __init__(self, cfg: ModelConfig, rng):
        ph, pw = cfg.patch_size
        self.cfg = cfg
        self.fc1 = Linear(ph * pw * cfg.image_channels, cfg.backbone_hidden, rng)
        self.fc2 = Linear(cfg.backbone_hidden, cfg.backbone_channels, rng)

    def __call__(self, images) -> Tensor:
        images = nm.as_tensor(images)
        cfg = self.cfg
        if images.ndim != 4 or images.shape[1:] != (*cfg.image_size, cfg.image_channels):
            raise ConfigError(f"expected images (B, {cfg.image_size[0]}, {cfg.image_size[1]}, "
                              f"{cfg.image_channels}), got {images.shape}")
        b = images.shape[0]
        (h, w), (ph, pw) = cfg.feature_grid, cfg.patch_size
        patches = nm.reshape(images, (b, h, ph, w, pw, cfg.image_channels))
        patches = nm.reshape(nm.transpose(patches, (0, 1, 3, 2, 4, 5)), (b, h * w, -1))
        feats = nm.relu(self.fc2(nm.relu(self.fc1(patches))))
        return nm.reshape(feats, (b, h, w, cfg.backbone_channels))


def sine_positional_encoding(height: int, width: int, dim: int, temperature: float = 10000.0) -> np.ndarray:
    """Fixed 2D sine encoding, shape ``(height * width, dim)`` in row-major grid order.

    The first ``dim/2`` channels encode the row, the rest the column. With
    ``y = 2*pi*(row + 1)/height`` and ``f = dim/2``, channel ``i < f`` is
    ``sin(y / T**(2*(i//2)/f))`` for even ``i`` and ``cos(...)`` for odd ``i``;
    columns use ``x = 2*pi*(col + 1)/width`` the same way.
    """
    if dim % 2:
        raise ConfigError("positional encoding width must be even")
    half = dim // 2
    i = np.arange(half)
    denom = temperature ** (2 * (i // 2) / half)
    rows = 2 * np.pi * (np.arange(height) + 1) / height
    cols = 2 * np.pi * (np.arange(width) + 1) / width

    def encode(coord):
        arg = coord[:, None] / denom
        return np.where(i % 2 == 0, np.sin(arg), np.cos(arg))

    ey, ex = encode(rows), encode(cols)
    grid = np.concatenate([np.repeat(ey[:, None, :], width, axis=1),
                           np.repeat(ex[None, :, :], height, axis=0)], axis=-1)
    return grid.reshape(height * width, dim)


@dataclass
class ModelOutput:
    camera_scale: Tensor          # (B,)
    camera_translation: Tensor    # (B, 2)
    joints3d: Tensor              # (B, K, 3)
    coarse_vertices3d: Tensor     # (B, N, 3)
    fine_vertices3d: Tensor       # (B, M, 3)
    regressed_joints3d: Tensor    # (B, K, 3)
    joints2d: Tensor              # (B, K, 2)
    regressed_joints2d: Tensor    # (B, K, 2)
    attention: dict = field(default_factory=dict)


def project(points3d, scale, translation) -> Tensor:
    """Weak-perspective projection ``s * Pi(X) + t`` for batched points ``(B, P, 3)``."""
    points3d = nm.as_tensor(points3d)
    b = points3d.shape[0]
    flat = nm.matmul(points3d, Tensor(ORTHOGRAPHIC.astype(points3d.dtype)))
    return flat * nm.reshape(scale, (b, 1, 1)) + nm.reshape(translation, (b, 1, 2))


class FastMETRO(Module):
    def __init__(self, config: ModelConfig, topology: Topology, seed: int = 0):
        if (topology.num_joints, topology.num_vertices, topology.num_fine_vertices) != (
                config.num_joints, config.num_vertices, config.num_fine_vertices):
            raise ConfigError(
                f"topology (K={topology.num_joints}, N={topology.num_vertices}, M={topology.num_fine_vertices}) "
                f"does not match config (K={config.num_joints}, N={config.num_vertices}, "
                f"M={config.num_fine_vertices})")
        self.config = config
        self.topology = topology
        rng = np.random.default_rng(seed)
        d0, k, n = config.stage_dims[0], config.num_joints, config.num_vertices
        h, w = config.feature_grid

        self.backbone = ToyBackbone(config, rng)
        self.input_proj = Linear(config.backbone_channels, d0, rng)
        self.cam_token = Tensor(xavier_uniform(rng, d0, 1, (1, d0)), requires_grad=True)
        self.joint_tokens = Tensor(xavier_uniform(rng, d0, k, (k, d0)), requires_grad=True)
        self.vertex_tokens = Tensor(xavier_uniform(rng, d0, n, (n, d0)), requires_grad=True)
        if config.positional_encoding == "learned":
            self.pos_embed = Tensor(xavier_uniform(rng, d0, h * w, (h * w, d0)), requires_grad=True)
        elif config.positional_encoding == "fixed_sine":
            self.pos_embed = Tensor(sine_positional_encoding(h, w, d0, config.pe_temperature))
        else:
            self.pos_embed = None
        self.stages = [Stage(d, ne, nd, config, rng)
                       for d, ne, nd in zip(config.stage_dims, config.enc_layers, config.dec_layers)]
        self.reductions = [Reduction(a, b, rng) for a, b in zip(config.stage_dims, config.stage_dims[1:])]
        d_last = config.stage_dims[-1]
        self.xyz_head = Linear(d_last, 3, rng)
        self.cam_head = Linear(d_last, 3, rng)
        self.attention_mask = self._build_mask()

    def _build_mask(self):
        cfg = self.config
        if cfg.mask_mode == "off":
            return None
        mask: AttentionMask = build_attention_mask(self.topology.adjacency, cfg.num_joints,
                                                   half_heads=cfg.mask_mode == "half_heads",
                                                   num_heads=cfg.num_heads)
        return mask.for_heads(cfg.num_heads)

    # -- pipeline steps ---------------------------------------------------------
    def embed_features(self, features) -> Tensor:
        """``(B, H, W, C)`` -> ``(B, HW, D1)`` with the positional encoding added."""
        features = nm.as_tensor(features)
        b, h, w, c = features.shape
        if (h, w) != self.config.feature_grid or c != self.config.backbone_channels:
            raise DimensionError(f"features {features.shape} do not match grid "
                                 f"{self.config.feature_grid} x {self.config.backbone_channels}")
        x = self.input_proj(nm.reshape(features, (b, h * w, c)))
        if self.pos_embed is not None:
            x = x + self.pos_embed
        return x

    def encode(self, stage: int, image_features: Tensor, cam_token: Tensor, maps=None):
        """Returns ``(camera feature (B, D), aggregated image features (B, HW, D))``."""
        b = image_features.shape[0]
        d = image_features.shape[-1]
        cam = nm.reshape(cam_token, (-1, 1, d))
        if cam.shape[0] != b:  # the shared learnable token
            cam = nm.expand(cam, (b, 1, d))
        x = nm.concat([cam, image_features], axis=1)
        for layer in self.stages[stage].encoder:
            x = layer(x, maps)
        return x[:, 0], x[:, 1:]

    def decode(self, stage: int, aggregated: Tensor, joint_tokens: Tensor, vertex_tokens: Tensor,
               mask=..., self_maps=None, cross_maps=None):
        """Returns ``(joint features (B, K, D), vertex features (B, N, D))``."""
        if mask is ...:
            mask = self.attention_mask
        b, d = aggregated.shape[0], aggregated.shape[-1]
        k = self.config.num_joints
        if joint_tokens.ndim == 2:
            joint_tokens = nm.expand(joint_tokens, (b, *joint_tokens.shape))
            vertex_tokens = nm.expand(vertex_tokens, (b, *vertex_tokens.shape))
        tokens = nm.concat([joint_tokens, vertex_tokens], axis=1)
        if mask is not None and np.shape(mask)[-1] != tokens.shape[1]:
            raise ConfigError(f"mask covers {np.shape(mask)[-1]} tokens, decoder has {tokens.shape[1]}")
        for layer in self.stages[stage].decoder:
            tokens = layer(tokens, aggregated, mask, self_maps, cross_maps)
        return tokens[:, :k], tokens[:, k:]

    def reduce_stage(self, stage: int, cam, image, joints, vertices):
        r = self.reductions[stage]
        return r.cam(cam), r.image(image), r.tokens(joints), r.tokens(vertices)

    def regress_outputs(self, cam_feature, joint_features, vertex_features) -> ModelOutput:
        topo = self.topology
        raw_cam = self.cam_head(cam_feature)
        scale = nm.softplus(raw_cam[:, 0])
        trans = raw_cam[:, 1:3]
        joints = self.xyz_head(joint_features)
        coarse = self.xyz_head(vertex_features)
        fine = sparse_dense_matmul(topo.upsample, coarse)
        regressed = sparse_dense_matmul(topo.regressor, fine)
        return ModelOutput(scale, trans, joints, coarse, fine, regressed,
                           project(joints, scale, trans), project(regressed, scale, trans))

    def forward(self, images, record_attention: bool = False) -> ModelOutput:
        maps = {"encoder": [], "decoder_self": [], "decoder_cross": []} if record_attention else None
        enc_maps = maps["encoder"] if maps else None
        self_maps = maps["decoder_self"] if maps else None
        cross_maps = maps["decoder_cross"] if maps else None

        x = self.embed_features(self.backbone(images))
        cam, joints, vertices = self.cam_token, self.joint_tokens, self.vertex_tokens
        for i in range(len(self.stages)):
            cam, x = self.encode(i, x, cam, enc_maps)
            joints, vertices = self.decode(i, x, joints, vertices, self_maps=self_maps, cross_maps=cross_maps)
            if i < len(self.reductions):
                cam, x, joints, vertices = self.reduce_stage(i, cam, x, joints, vertices)
        out = self.regress_outputs(cam, joints, vertices)
        if maps is not None:
            out.attention = maps
        return out

    __call__ = forward


# -- parameter budget -------------------------------------------------------------

def _linear(d_in: int, d_out: int) -> int:
    return d_in * d_out + d_out


def parameter_group(name: str) -> str:
    head = name.split(".")[0]
    if head in ("cam_token", "joint_tokens", "vertex_tokens"):
        return "tokens"
    if head == "stages":
        return name.split(".")[2]  # encoder / decoder
    return {"backbone": "backbone", "input_proj": "input_projection", "pos_embed": "positional",
            "reductions": "reduction", "xyz_head": "heads", "cam_head": "heads"}[head]


def count_parameters(config: ModelConfig) -> dict[str, int]:
    """Closed-form learnable-scalar counts per component.

    ``total`` is the transformer budget and excludes the backbone, which is
    reported separately under ``backbone``.
    """
    d0, k, n = config.stage_dims[0], config.num_joints, config.num_vertices
    h, w = config.feature_grid
    attn = lambda d: 4 * _linear(d, d)  # noqa: E731
    mlp = lambda d: _linear(d, config.mlp_expansion * d) + _linear(config.mlp_expansion * d, d)  # noqa: E731
    counts = {
        "tokens": (1 + k + n) * d0,
        "input_projection": _linear(config.backbone_channels, d0),
        "positional": h * w * d0 if config.positional_encoding == "learned" else 0,
        "encoder": sum(ne * (attn(d) + mlp(d) + 2 * 2 * d)
                       for d, ne in zip(config.stage_dims, config.enc_layers)),
        "decoder": sum(nd * (2 * attn(d) + mlp(d) + 3 * 2 * d)
                       for d, nd in zip(config.stage_dims, config.dec_layers)),
        "reduction": sum(3 * _linear(a, b) for a, b in zip(config.stage_dims, config.stage_dims[1:])),
        "heads": 2 * _linear(config.stage_dims[-1], 3),
    }
    counts["total"] = sum(counts.values())
    ph, pw = config.patch_size
    counts["backbone"] = (_linear(ph * pw * config.image_channels, config.backbone_hidden)
                          + _linear(config.backbone_hidden, config.backbone_channels))
    return counts


def count_instantiated(model: FastMETRO) -> dict[str, int]:
    """Same breakdown as :func:`count_parameters`, from an actual model."""
    counts = dict.fromkeys(["tokens", "input_projection", "positional", "encoder", "decoder",
                            "reduction", "heads"], 0)
    backbone = 0
    for name, p in model.named_parameters():
        group = parameter_group(name)
        if group == "backbone":
            backbone += p.data.size
        else:
            counts[group] += p.data.size
    counts["total"] = sum(counts.values())
    counts["backbone"] = backbone
    return counts
