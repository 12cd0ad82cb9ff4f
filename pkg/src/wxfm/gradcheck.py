"""Central finite-difference check of analytic parameter gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_coords: int
    worst: tuple[str, int]
    analytic: np.ndarray
    numeric: np.ndarray

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def scalar_probe(out: torch.Tensor, seed: int = 0) -> torch.Tensor:
    """Fixed random projection of an output tensor to a scalar, so every element counts."""
    g = torch.Generator().manual_seed(seed)
    w = torch.randn(out.shape, generator=g, dtype=out.dtype)
    return (out * w).sum()


def check_gradients(fn, named_params, n_coords: int = 100, eps: float = 1e-4, seed: int = 0,
                    floor: float = 1e-8) -> GradCheckResult:
    """Compare d fn / d theta with (fn(theta + eps) - fn(theta - eps)) / 2 eps.

    ``fn`` takes no arguments and returns a scalar tensor; ``named_params``
    is a list of (name, tensor) pairs that require grad. Coordinates are
    drawn uniformly over all parameter elements. The relative error is
    |a - n| / max(|a|, |n|, floor); ``floor`` only matters for gradients
    that are zero up to rounding. At float64 the default step keeps both the
    O(eps^2) truncation and the O(1e-16 / eps) rounding error near 1e-8.
    """
    named_params = [(n, p) for n, p in named_params if p.requires_grad]
    if not named_params:
        raise ValueError("no trainable parameters to check")
    for p in (p for _, p in named_params):
        p.grad = None
    value = fn()
    if value.dtype != torch.float64:
        raise TypeError("gradient checks need a float64 function")
    grads = torch.autograd.grad(value, [p for _, p in named_params], allow_unused=True)
    sizes = np.array([p.numel() for _, p in named_params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    flat = rng.choice(offsets[-1], size=min(n_coords, offsets[-1]), replace=False)

    analytic, numeric, where = [], [], []
    with torch.no_grad():
        for f in flat:
            k = int(np.searchsorted(offsets, f, side="right") - 1)
            i = int(f - offsets[k])
            name, p = named_params[k]
            g = grads[k]
            view = p.view(-1)
            orig = view[i].item()
            view[i] = orig + eps
            up = fn().item()
            view[i] = orig - eps
            down = fn().item()
            view[i] = orig
            analytic.append(0.0 if g is None else g.reshape(-1)[i].item())
            numeric.append((up - down) / (2 * eps))
            where.append((name, i))
    a, n = np.array(analytic), np.array(numeric)
    rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    j = int(rel.argmax())
    return GradCheckResult(float(rel[j]), len(flat), where[j], a, n)
