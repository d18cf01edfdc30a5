"""Central finite differences as an oracle for reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def numeric_gradient(f: Callable[[], Tensor], x: Tensor, step: float = 1e-5,
                     indices=None, kink_retries: int = 0) -> np.ndarray:
    """Central-difference gradient of scalar ``f()`` with respect to ``x.data``.

    ``x`` is perturbed in place and restored. Only ``indices`` (flat) are
    probed when given; other entries of the result stay zero.

    With ``kink_retries > 0`` the two one-sided slopes are compared first; if
    they disagree by more than 1e-5 (relative, beyond roundoff) the probe
    straddles a kink (ReLU, |.|) and the step is shrunk tenfold, at most
    ``kink_retries`` times.
    """
    flat = x.data.reshape(-1)
    out = np.zeros(flat.size)
    probe = range(flat.size) if indices is None else indices
    base = f().item() if kink_retries else 0.0
    for i in probe:
        orig = flat[i]
        h = step
        for attempt in range(kink_retries + 1):
            flat[i] = orig + h
            hi = f().item()
            flat[i] = orig - h
            lo = f().item()
            flat[i] = orig
            if attempt == kink_retries:
                break
            up, down = (hi - base) / h, (base - lo) / h
            roundoff = 100.0 * np.finfo(np.float64).eps * (abs(base) + 1.0) / h
            if abs(up - down) <= 1e-5 * max(abs(up), abs(down)) + roundoff:
                break
            h /= 10.0
        out[i] = (hi - lo) / (2.0 * h)
    return out.reshape(x.shape)


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5,
                            floor: float = 1e-12) -> float:
    """Max relative error between backprop and central differences of ``f(x)``."""
    x.requires_grad = True
    x.zero_grad()
    f(x).backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.zero_grad()
    numeric = numeric_gradient(lambda: f(x), x, step)
    return float(relative_error(analytic, numeric, floor).max())


def check_parameter_gradients(f: Callable[[], Tensor], params: Iterable[tuple[str, Tensor]],
                              probes: int | None = 8, step: float = 1e-4, floor: float = 1e-3,
                              seed: int = 0, kink_retries: int = 3) -> dict[str, float]:
    """Compare backprop against central differences for named leaf tensors.

    ``f`` recomputes a scalar from the current parameter values. Each tensor
    gets ``probes`` randomly chosen entries probed (all when ``None``).
    Gradient entries smaller than ``floor`` are effectively compared in
    absolute terms, since central differences cannot resolve them relatively.
    Returns the max relative error per parameter name.
    """
    params = list(params)
    for _, p in params:
        p.zero_grad()
    f().backward()
    rng = np.random.default_rng(seed)
    errors = {}
    for name, p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        size = p.data.size
        idx = np.arange(size) if probes is None or probes >= size else rng.choice(size, probes, replace=False)
        numeric = numeric_gradient(f, p, step, idx, kink_retries)
        errors[name] = float(relative_error(analytic.reshape(-1)[idx], numeric.reshape(-1)[idx], floor).max())
    return errors
