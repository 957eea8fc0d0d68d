"""Central finite-difference gradient oracle.

Only forward evaluations are used, so it stays independent of autograd.
"""
from __future__ import annotations

import numpy as np
import torch
from torch import nn


def numeric_gradients(objective, model: nn.Module, batch, step: float = 1e-5) -> dict[str, np.ndarray]:
    out = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            g = np.zeros(flat.numel())
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                fp = float(objective(model, batch))
                flat[i] = orig - step
                fm = float(objective(model, batch))
                flat[i] = orig
                g[i] = (fp - fm) / (2 * step)
            out[name] = g.reshape(tuple(p.shape))
    return out


def relative_error(a: dict[str, np.ndarray], b: dict[str, np.ndarray]) -> float:
    va = np.concatenate([np.ravel(a[k]) for k in sorted(a)])
    vb = np.concatenate([np.ravel(b[k]) for k in sorted(a)])
    denom = max(np.linalg.norm(va), np.linalg.norm(vb), 1e-12)
    return float(np.linalg.norm(va - vb) / denom)
