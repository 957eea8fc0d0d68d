"""VP-SDE over (semantic, style) factor pairs with shift-controlled sampling.

Forward: dx = -1/2 beta(t) x dt + sqrt(beta(t)) dw, beta linear in t.
Reverse sampling attenuates each factor's score by (1 - lambda) so that
lambda > 0 pushes samples away from the training factor distribution.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .backbone import check_finite, make_linear, make_optimizer
from .errors import NumericError, UsageError


@dataclass(frozen=True)
class DiffusionSchedule:
    beta_min: float = 0.1
    beta_max: float = 20.0
    T: float = 1.0
    num_steps: int = 200

    def validate(self) -> None:
        if not 0 < self.beta_min <= self.beta_max:
            raise UsageError("need 0 < beta_min <= beta_max")
        if self.num_steps < 1 or self.T <= 0:
            raise UsageError("need num_steps >= 1 and T > 0")

    def beta(self, t):
        return self.beta_min + t * (self.beta_max - self.beta_min)

    def beta_integral(self, t):
        return self.beta_min * t + 0.5 * t * t * (self.beta_max - self.beta_min)

    def alpha(self, t):
        if isinstance(t, torch.Tensor):
            return torch.exp(-0.5 * self.beta_integral(t))
        return math.exp(-0.5 * self.beta_integral(t))

    def sigma(self, t):
        if isinstance(t, torch.Tensor):
            return torch.sqrt(-torch.expm1(-self.beta_integral(t)))
        return math.sqrt(-math.expm1(-self.beta_integral(t)))

    def drift(self, x, t):
        return -0.5 * self.beta(t) * x

    def diffusion(self, t):
        return self.beta(t) ** 0.5


def forward_perturb(sched: DiffusionSchedule, x0: torch.Tensor, t, generator: torch.Generator):
    """Sample the VP marginal at time t; returns (x_t, noise)."""
    t_arr = torch.as_tensor(t, dtype=x0.dtype)
    if torch.any(t_arr < 0) or torch.any(t_arr > sched.T):
        raise UsageError(f"t must lie in [0, {sched.T}]")
    noise = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    if t_arr.ndim == 1:
        t_arr = t_arr.unsqueeze(-1)
    return sched.alpha(t_arr) * x0 + sched.sigma(t_arr) * noise, noise


class ScoreNet(nn.Module):
    """Joint score of (c_t, s_t) with one head per factor.

    Raw head outputs are divided by sigma(t), so the network only has to
    predict the (negated) unit-scale noise. Factors are standardised with
    the ``mean``/``std`` buffers fitted on the training set.
    """

    def __init__(self, d1: int, d2: int, sched: DiffusionSchedule, generator: torch.Generator,
                 hidden: int = 128, num_freqs: int = 8):
        super().__init__()
        self.d1, self.d2, self.sched = d1, d2, sched
        self.register_buffer("freqs", torch.exp(torch.linspace(0.0, math.log(100.0), num_freqs)))
        self.register_buffer("mean", torch.zeros(d1 + d2))
        self.register_buffer("std", torch.ones(d1 + d2))
        self.register_buffer("trained", torch.zeros(()))
        n_in = d1 + d2 + 2 * num_freqs
        self.fc1 = make_linear(n_in, hidden, generator)
        self.fc2 = make_linear(hidden, hidden, generator)
        self.head_c = make_linear(hidden, d1, generator)
        self.head_s = make_linear(hidden, d2, generator)

    def embed_time(self, t: torch.Tensor) -> torch.Tensor:
        arg = t.unsqueeze(-1) * self.freqs.to(t.dtype)
        return torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1)

    def forward(self, c: torch.Tensor, s: torch.Tensor, t: torch.Tensor):
        z = torch.cat([c, s, self.embed_time(t)], dim=-1)
        z = nn.functional.silu(self.fc1(z))
        z = nn.functional.silu(self.fc2(z))
        inv_sigma = 1.0 / self.sched.sigma(t).unsqueeze(-1)
        return self.head_c(z) * inv_sigma, self.head_s(z) * inv_sigma

    def fit_scaler(self, c: torch.Tensor, s: torch.Tensor) -> None:
        x = torch.cat([c, s], dim=-1)
        with torch.no_grad():
            self.mean.copy_(x.mean(0))
            self.std.copy_(x.std(0, unbiased=False).clamp_min(1e-6) if len(x) > 1 else torch.ones(x.shape[1]))

    def standardize(self, c, s):
        x = (torch.cat([c, s], dim=-1) - self.mean) / self.std
        return x[..., : self.d1], x[..., self.d1 :]

    def unstandardize(self, c, s):
        x = torch.cat([c, s], dim=-1) * self.std + self.mean
        return x[..., : self.d1], x[..., self.d1 :]

    @property
    def is_trained(self) -> bool:
        return bool(self.trained.item())


def dsm_loss(score_fn, sched: DiffusionSchedule, c: torch.Tensor, s: torch.Tensor,
             generator: torch.Generator) -> torch.Tensor:
    """Denoising score matching with sigma(t)^2 weighting, shared t per item."""
    if len(c) == 0:
        raise UsageError("empty batch")
    n = len(c)
    t = sched.T * (1.0 - torch.rand(n, generator=generator, dtype=c.dtype))
    ct, eps_c = forward_perturb(sched, c, t, generator)
    st, eps_s = forward_perturb(sched, s, t, generator)
    score_c, score_s = score_fn(ct, st, t)
    sig = sched.sigma(t).unsqueeze(-1)
    per_item = ((sig * score_c + eps_c) ** 2).sum(-1) + ((sig * score_s + eps_s) ** 2).sum(-1)
    return check_finite("dsm_loss", per_item.mean())


def train_score(net: ScoreNet, c: torch.Tensor, s: torch.Tensor, epochs: int, generator: torch.Generator,
                *, lr: float = 1e-3, batch_size: int = 128) -> list[dict]:
    """Fit the score net on training factors; one epoch is one pass over the set."""
    if len(c) == 0:
        raise UsageError("empty factor set")
    net.fit_scaler(c, s)
    cz, sz = net.standardize(c.detach(), s.detach())
    opt = make_optimizer([p for p in net.parameters()], lr)
    n = len(cz)
    log = []
    for epoch in range(epochs):
        total = 0.0
        order = torch.randperm(n, generator=generator)
        for i in range(0, n, batch_size):
            idx = order[i : i + batch_size]
            try:
                loss = dsm_loss(net, net.sched, cz[idx], sz[idx], generator)
            except NumericError as exc:
                raise NumericError(f"score training diverged at epoch {epoch}: {exc}") from exc
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        log.append({"epoch": epoch, "dsm_loss": total / n})
    net.trained.fill_(1.0)
    for p in net.parameters():
        p.requires_grad_(False)
    return log


@dataclass(frozen=True)
class PerturbationConfig:
    lambda_c: float = 0.0
    lambda_s: float = 0.0
    num_samples: int = 100
    seed: int = 0
    mode: str | None = None  # None, "pseudo_ind" or "pseudo_ood"

    def validate(self) -> None:
        for name in ("lambda_c", "lambda_s"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise UsageError(f"{name}={v} outside [0, 1]")
        if self.num_samples < 0:
            raise UsageError("num_samples must be >= 0")
        if self.mode == "pseudo_ind" and not (self.lambda_c == 0 and self.lambda_s > 0):
            raise UsageError("pseudo-InD sampling needs lambda_c = 0 and lambda_s > 0")
        if self.mode == "pseudo_ood" and not (self.lambda_c > 0 and self.lambda_s > 0):
            raise UsageError("pseudo-OOD sampling needs lambda_c > 0 and lambda_s > 0")
        if self.mode not in (None, "pseudo_ind", "pseudo_ood"):
            raise UsageError(f"unknown mode {self.mode!r}")


def reverse_sample(net: ScoreNet, sched: DiffusionSchedule, pcfg: PerturbationConfig):
    """Euler-Maruyama integration of the attenuated reverse SDE from T to 0.

    Returns (c, s) tensors in the original (unstandardised) factor space.
    """
    pcfg.validate()
    sched.validate()
    if not net.is_trained:
        raise UsageError("score network has not been trained")
    dtype = net.fc1.weight.dtype
    gen = torch.Generator().manual_seed(int(pcfg.seed))
    n = pcfg.num_samples
    c = torch.randn((n, net.d1), generator=gen, dtype=dtype)
    s = torch.randn((n, net.d2), generator=gen, dtype=dtype)
    dt = sched.T / sched.num_steps
    wc, ws = 1.0 - pcfg.lambda_c, 1.0 - pcfg.lambda_s
    with torch.no_grad():
        for i in range(sched.num_steps):
            t = sched.T - i * dt
            g2 = sched.beta(t)
            tt = torch.full((n,), t, dtype=dtype)
            score_c, score_s = net(c, s, tt) if n else (c, s)
            zc = torch.randn(c.shape, generator=gen, dtype=dtype)
            zs = torch.randn(s.shape, generator=gen, dtype=dtype)
            c = c - (sched.drift(c, t) - wc * g2 * score_c) * dt + math.sqrt(g2 * dt) * zc
            s = s - (sched.drift(s, t) - ws * g2 * score_s) * dt + math.sqrt(g2 * dt) * zs
            if not (torch.all(torch.isfinite(c)) and torch.all(torch.isfinite(s))):
                raise NumericError(f"reverse sampling produced non-finite state at step {i}")
        return net.unstandardize(c, s)


def generate_pseudo(net: ScoreNet, sched: DiffusionSchedule, dis, lambda_c_ood: float, lambda_s: float,
                    n: int, seed: int):
    """Decode (c_ind ⊕ s_ood) and (c_ood ⊕ s_ood) into pseudo representations.

    Returns ``(pseudo_ind, pseudo_ood, factors)`` where ``factors`` holds the
    sampled (c, s) pairs of both runs for inspection.
    """
    ind_cfg = PerturbationConfig(0.0, lambda_s, n, seed=_derive(seed, 0), mode="pseudo_ind")
    ood_cfg = PerturbationConfig(lambda_c_ood, lambda_s, n, seed=_derive(seed, 1), mode="pseudo_ood")
    c_ind, s_ind = reverse_sample(net, sched, ind_cfg)
    c_ood, s_ood = reverse_sample(net, sched, ood_cfg)
    with torch.no_grad():
        if n == 0:
            empty = torch.zeros((0, net.d1 + net.d2), dtype=c_ind.dtype)
            return empty, empty.clone(), {}
        h_ind = dis.decode((c_ind, s_ind))
        h_ood = dis.decode((c_ood, s_ood))
    factors = {"ind": (c_ind, s_ind), "ood": (c_ood, s_ood)}
    return h_ind, h_ood, factors


def _derive(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([int(seed), k]).generate_state(1)[0])


def save_pseudo(path, pseudo_ind, pseudo_ood, lambda_c: float, lambda_s: float) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for kind, reps, lc in (("pseudo_ind", pseudo_ind, 0.0), ("pseudo_ood", pseudo_ood, lambda_c)):
            for row in np.asarray(reps, dtype=np.float64):
                rec = {"kind": kind, "lambda_c": lc, "lambda_s": lambda_s, "values": row.tolist()}
                fh.write(json.dumps(rec) + "\n")


def load_pseudo(path) -> tuple[np.ndarray, np.ndarray]:
    rows = {"pseudo_ind": [], "pseudo_ood": []}
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("kind") not in rows:
                raise UsageError(f"line {lineno}: unknown kind {rec.get('kind')!r}")
            rows[rec["kind"]].append(rec["values"])
    return tuple(np.array(rows[k], dtype=np.float64) for k in ("pseudo_ind", "pseudo_ood"))
