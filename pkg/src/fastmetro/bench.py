"""Wall-clock measurements of the forward pass."""

from __future__ import annotations

import time

import numpy as np

from .mesh import random_topology
from .model import EncoderLayer, FastMETRO, ModelConfig
from .numeric import Tensor, no_grad

SWEEP_TOKENS = (64, 128, 256, 512)


def _timings(fn, iters: int, warmup: int = 1) -> np.ndarray:
    for _ in range(warmup):
        fn()
    out = np.empty(iters)
    for i in range(iters):
        start = time.perf_counter()
        fn()
        out[i] = time.perf_counter() - start
    return out


def bench_forward(config: ModelConfig, batch: int = 1, iters: int = 5, seed: int = 0) -> dict[str, float]:
    """Mean / std latency of a full forward pass (gradient recording off)."""
    if batch < 1 or iters < 1:
        raise ValueError("batch and iters must be positive")
    topo = random_topology(config.num_joints, config.num_vertices, config.num_fine_vertices, seed)
    model = FastMETRO(config, topo, seed)
    images = Tensor(np.random.default_rng(seed).random((batch, *config.image_size, config.image_channels)))
    with no_grad():
        t = _timings(lambda: model(images), iters)
    return {"batch": batch, "iters": iters, "mean_ms": 1e3 * float(t.mean()), "std_ms": 1e3 * float(t.std()),
            "median_ms": 1e3 * float(np.median(t)), "samples_per_s": batch / float(t.mean())}


def token_sweep(dim: int = 512, heads: int = 8, tokens=SWEEP_TOKENS, batch: int = 1, iters: int = 5,
                mlp_expansion: int = 4, seed: int = 0) -> list[dict[str, float]]:
    """Latency of one encoder layer as the sequence grows.

    Self-attention costs grow with the square of the token count, the
    linear layers only linearly, so latency rises faster than the length.
    """
    rng = np.random.default_rng(seed)
    layer = EncoderLayer(dim, heads, mlp_expansion * dim, 1e-5, rng)
    rows = []
    with no_grad():
        for n in tokens:
            x = Tensor(rng.normal(size=(batch, n, dim)))
            t = _timings(lambda: layer(x), iters)
            rows.append({"tokens": n, "median_ms": 1e3 * float(np.median(t)), "mean_ms": 1e3 * float(t.mean()),
                         "std_ms": 1e3 * float(t.std())})
    return rows
