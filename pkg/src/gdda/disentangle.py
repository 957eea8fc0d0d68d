"""Phase 1: split graph representations into semantic and style factors.

Encoders ``enc_c``/``enc_s`` map h to (c, s); the decoder maps c ⊕ s back to
h. Training swaps the style factor for a Gaussian draw and asks an auxiliary
classifier to be indifferent to the swap.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import GIN, MLP, GraphBatch, check_finite, collate, make_linear, make_optimizer
from .data import GraphInstance
from .errors import NumericError, ShapeError, UsageError

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class DisentanglerConfig:
    d1: int = 8
    d2: int = 8
    beta1: float = 1.0
    beta2: float = 1.0


class FactorPair(NamedTuple):
    semantic: torch.Tensor
    style: torch.Tensor


class Phase1Losses(NamedTuple):
    recon: torch.Tensor
    sim: torch.Tensor
    cls: torch.Tensor
    total: torch.Tensor


class Disentangler(nn.Module):
    def __init__(self, d: int, num_classes: int, cfg: DisentanglerConfig, generator: torch.Generator):
        super().__init__()
        if cfg.d1 + cfg.d2 != d:
            raise ShapeError(f"d1 + d2 = {cfg.d1 + cfg.d2} != representation width {d}")
        if cfg.d2 < 1 or cfg.d1 < 1:
            raise ShapeError("factor widths must be >= 1")
        self.d, self.d1, self.d2 = d, cfg.d1, cfg.d2
        self.beta1, self.beta2 = cfg.beta1, cfg.beta2
        self.enc_c = MLP(d, d, cfg.d1, generator)
        self.enc_s = MLP(d, d, cfg.d2, generator)
        self.dec = MLP(d, d, d, generator)
        self.phi = make_linear(d, num_classes, generator)

    def encode(self, h: torch.Tensor) -> FactorPair:
        if h.shape[-1] != self.d:
            raise ShapeError(f"encoder expects width {self.d}, got {h.shape[-1]}")
        return FactorPair(self.enc_c(h), self.enc_s(h))

    def decode(self, fp: FactorPair) -> torch.Tensor:
        c, s = fp
        if c.shape[-1] != self.d1 or s.shape[-1] != self.d2:
            raise ShapeError(f"decoder expects widths ({self.d1}, {self.d2}), got ({c.shape[-1]}, {s.shape[-1]})")
        return self.dec(torch.cat([c, s], dim=-1))


def style_resample(d2: int, generator: torch.Generator, n: int | None = None, dtype=torch.float32) -> torch.Tensor:
    if d2 < 1:
        raise UsageError("d2 must be >= 1")
    shape = (d2,) if n is None else (n, d2)
    return torch.randn(shape, generator=generator, dtype=dtype)


def kl_softmax(p_logits: torch.Tensor, q_logits: torch.Tensor) -> torch.Tensor:
    """Row-wise KL(softmax(p) || softmax(q)) with a probability floor."""
    p = torch.softmax(p_logits, dim=-1).clamp_min(PROB_FLOOR)
    q = torch.softmax(q_logits, dim=-1).clamp_min(PROB_FLOOR)
    return (p * (p.log() - q.log())).sum(-1)


def phase1_losses(dp: Disentangler, h: torch.Tensor, y: torch.Tensor, s_prime: torch.Tensor) -> Phase1Losses:
    """Batched phase-1 losses; ``s_prime`` is the resampled style (n, d2)."""
    c, s = dp.encode(h)
    h_re = check_finite("h_re", dp.decode(FactorPair(c, s)))
    c_re, s_re = dp.encode(h_re)
    h_prime = check_finite("h_prime", dp.decode(FactorPair(c, s_prime)))
    recon = (h - h_re).abs().mean() + (c - c_re).abs().mean() + (s - s_re).abs().mean()
    logits_prime = dp.phi(h_prime)
    sim = kl_softmax(logits_prime, dp.phi(h_re)).mean()
    cls = F.cross_entropy(logits_prime, y)
    for name, term in (("L_recon", recon), ("L_sim", sim), ("L_cls", cls)):
        check_finite(name, term)
    return Phase1Losses(recon, sim, cls, recon + dp.beta1 * sim + dp.beta2 * cls)


def _batches(n: int, batch_size: int, generator: torch.Generator):
    order = torch.randperm(n, generator=generator)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def train_phase1(
    dp: Disentangler,
    data,
    epochs: int,
    generator: torch.Generator,
    *,
    backbone: GIN | None = None,
    lr: float = 1e-3,
    batch_size: int = 64,
) -> list[dict]:
    """Minimise mean L_total; returns a per-epoch log of the loss components.

    ``data`` is a list of GraphInstance when ``backbone`` is given (the backbone
    is then trained jointly), otherwise a ``(reps, labels)`` tensor pair.
    """
    if backbone is not None:
        graphs: Sequence[GraphInstance] = data
        if not graphs:
            raise UsageError("empty training set")
        dtype = backbone.layers[0].fc1.weight.dtype
        n = len(graphs)
        labels = torch.tensor([g.label for g in graphs])
        params = list(backbone.parameters()) + list(dp.parameters())
    else:
        reps, labels = data
        if len(reps) == 0:
            raise UsageError("empty training set")
        n = len(reps)
        dtype = reps.dtype
        params = list(dp.parameters())
    opt = make_optimizer(params, lr)
    log = []
    for epoch in range(epochs):
        totals = np.zeros(4)
        for idx in _batches(n, batch_size, generator):
            if backbone is not None:
                h = backbone(collate([graphs[i] for i in idx.tolist()], dtype=dtype))
            else:
                h = reps[idx]
            s_prime = style_resample(dp.d2, generator, n=len(idx), dtype=dtype)
            try:
                losses = phase1_losses(dp, h, labels[idx], s_prime)
            except NumericError as exc:
                raise NumericError(f"phase 1 diverged at epoch {epoch}: {exc}") from exc
            opt.zero_grad()
            losses.total.backward()
            opt.step()
            totals += len(idx) * np.array([v.item() for v in losses])
        rec, sim, cls, tot = totals / n
        log.append({"epoch": epoch, "L_recon": rec, "L_sim": sim, "L_cls": cls, "L_total": tot})
    for p in params:
        p.requires_grad_(False)
    return log


def write_log_csv(log: list[dict], path, fields: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields))
        w.writeheader()
        for row in log:
            w.writerow({k: row[k] for k in fields})
