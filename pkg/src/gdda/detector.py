"""Energy-based semantic OOD detector trained with worst-domain risk.

Higher energy means more OOD. The margin loss pushes InD energies below
``m_in`` and OOD energies above ``m_ood``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Mapping, NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import GIN, ClassifierHead, GraphBatch, check_finite, collate, make_optimizer
from .data import GraphInstance
from .errors import NumericError, UsageError


@dataclass(frozen=True)
class EnergyConfig:
    temperature: float = 1.0
    m_in: float = -7.0
    m_ood: float = -2.0
    lambda_weight: float = 0.1
    threshold: float = 0.0

    def validate(self) -> None:
        if self.temperature <= 0:
            raise UsageError("temperature must be positive")
        if not self.m_in < self.m_ood:
            raise UsageError("need m_in < m_ood")
        if self.lambda_weight < 0:
            raise UsageError("lambda_weight must be nonnegative")


class DetectionResult(NamedTuple):
    logits: np.ndarray
    energy: float
    is_ood: bool
    predicted_class: int


def energy(logits, temperature: float = 1.0):
    """-T * logsumexp(z / T) over the last axis; works on tensors and arrays."""
    if isinstance(logits, torch.Tensor):
        return -temperature * torch.logsumexp(logits / temperature, dim=-1)
    z = np.asarray(logits, dtype=np.float64) / temperature
    if z.shape[-1] == 0:
        raise UsageError("energy of empty logits")
    m = z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z - m).sum(axis=-1)) + m[..., 0]
    return -temperature * lse


def _mean_or_zero(x: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return x.mean() if x.numel() else like.new_zeros(())


def energy_margin_loss(head: nn.Module, cfg: EnergyConfig, ind_reps: torch.Tensor,
                       ood_reps: torch.Tensor) -> torch.Tensor:
    if len(ind_reps) == 0 and len(ood_reps) == 0:
        raise UsageError("energy_margin_loss needs at least one representation")
    ref = next(head.parameters())
    e_in = energy(head(ind_reps), cfg.temperature) if len(ind_reps) else ref.new_zeros(0)
    e_out = energy(head(ood_reps), cfg.temperature) if len(ood_reps) else ref.new_zeros(0)
    in_term = _mean_or_zero(F.relu(e_in - cfg.m_in) ** 2, ref)
    out_term = _mean_or_zero(F.relu(cfg.m_ood - e_out) ** 2, ref)
    return in_term + out_term


class Detector(nn.Module):
    def __init__(self, backbone: GIN, head: ClassifierHead, cfg: EnergyConfig, train_backbone: bool = False):
        super().__init__()
        self.backbone = backbone
        self.head = head
        self.cfg = cfg
        self.train_backbone = train_backbone

    def embed(self, inputs) -> torch.Tensor:
        """Representations for a GraphBatch, or pass-through for a tensor of reps."""
        if isinstance(inputs, GraphBatch):
            return self.backbone(inputs)
        return inputs

    def logits(self, inputs) -> torch.Tensor:
        return self.head(self.embed(inputs))


class ObjectiveTerms(NamedTuple):
    objective: torch.Tensor
    domain_ce: dict
    worst_domain: int
    l_energy: torch.Tensor


def minmax_terms(det: Detector, per_domain: Mapping[int, tuple], pseudo_ind: torch.Tensor,
                 pseudo_ood: torch.Tensor) -> ObjectiveTerms:
    """Worst-domain cross-entropy plus weighted energy-margin loss.

    ``per_domain`` maps a domain id to ``(inputs, labels)`` where inputs is a
    GraphBatch or a tensor of precomputed representations. The InD energy pool
    for domain e is pseudo_ind ∪ (original representations of e); the energy
    loss averages over training domains.
    """
    if not per_domain:
        raise UsageError("minmax objective needs at least one training domain")
    cfg = det.cfg
    ce, reps = {}, {}
    for dom in sorted(per_domain):
        inputs, labels = per_domain[dom]
        if len(labels) == 0:
            raise UsageError(f"empty batch for domain {dom}")
        h = det.embed(inputs)
        reps[dom] = h
        ce[dom] = F.cross_entropy(det.head(h), labels)
    worst = max(sorted(ce), key=lambda d: ce[d].item())
    if cfg.lambda_weight:
        pi = pseudo_ind.to(reps[worst].dtype)
        po = pseudo_ood.to(reps[worst].dtype)
        l_energy = torch.stack(
            [energy_margin_loss(det.head, cfg, torch.cat([pi, reps[d]]), po) for d in sorted(reps)]
        ).mean()
    else:
        l_energy = ce[worst].new_zeros(())
    obj = ce[worst] + cfg.lambda_weight * l_energy
    check_finite("minmax objective", obj)
    return ObjectiveTerms(obj, ce, worst, l_energy)


def minmax_objective(det: Detector, per_domain, pseudo_ind, pseudo_ood) -> torch.Tensor:
    return minmax_terms(det, per_domain, pseudo_ind, pseudo_ood).objective


def _domain_groups(graphs: list[GraphInstance]) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for i, g in enumerate(graphs):
        groups.setdefault(g.domain, []).append(i)
    return groups


def train_detector(det: Detector, graphs: list[GraphInstance], pseudo_ind, pseudo_ood, epochs: int,
                   generator: torch.Generator, *, lr: float = 1e-3, batch_size: int = 64) -> list[dict]:
    """Minimise the min-max objective, then fit the decision threshold.

    Each step draws one minibatch per training domain plus a matching slice of
    each pseudo pool. With a frozen backbone the training representations are
    computed once.
    """
    if not graphs:
        raise UsageError("empty training set")
    dtype = next(det.head.parameters()).dtype
    pseudo_ind = torch.as_tensor(np.asarray(pseudo_ind), dtype=dtype).reshape(-1, det.head.in_dim)
    pseudo_ood = torch.as_tensor(np.asarray(pseudo_ood), dtype=dtype).reshape(-1, det.head.in_dim)
    groups = _domain_groups(graphs)
    labels = torch.tensor([g.label for g in graphs])
    frozen_reps = None
    if not det.train_backbone:
        for p in det.backbone.parameters():
            p.requires_grad_(False)
        with torch.no_grad():
            frozen_reps = det.backbone(collate(graphs, dtype=dtype))
    params = [p for p in det.parameters() if p.requires_grad]
    opt = make_optimizer(params, lr)
    n_dom = {d: len(idx) for d, idx in groups.items()}
    steps = max(1, -(-max(n_dom.values()) // batch_size))
    log = []
    for epoch in range(epochs):
        perms = {d: torch.tensor(groups[d])[torch.randperm(n_dom[d], generator=generator)] for d in sorted(groups)}
        pi_perm = torch.randperm(len(pseudo_ind), generator=generator)
        po_perm = torch.randperm(len(pseudo_ood), generator=generator)
        acc = {"objective": 0.0, "worst_ce": 0.0, "l_energy": 0.0}
        for step in range(steps):
            per_domain = {}
            for d in sorted(groups):
                idx = _cyclic_slice(perms[d], step, batch_size)
                inputs = frozen_reps[idx] if frozen_reps is not None else collate(
                    [graphs[i] for i in idx.tolist()], dtype=dtype)
                per_domain[d] = (inputs, labels[idx])
            pi = pseudo_ind[_cyclic_slice(pi_perm, step, batch_size)] if len(pseudo_ind) else pseudo_ind
            po = pseudo_ood[_cyclic_slice(po_perm, step, batch_size)] if len(pseudo_ood) else pseudo_ood
            try:
                terms = minmax_terms(det, per_domain, pi, po)
            except NumericError as exc:
                raise NumericError(f"detector training diverged at epoch {epoch}: {exc}") from exc
            opt.zero_grad()
            terms.objective.backward()
            opt.step()
            acc["objective"] += terms.objective.item() / steps
            acc["worst_ce"] += terms.domain_ce[terms.worst_domain].item() / steps
            acc["l_energy"] += terms.l_energy.item() / steps
        log.append({"epoch": epoch, **acc})
    for p in det.parameters():
        p.requires_grad_(False)
    fit_threshold(det, graphs)
    return log


def _cyclic_slice(perm: torch.Tensor, step: int, size: int) -> torch.Tensor:
    n = len(perm)
    start = (step * size) % n
    idx = torch.arange(start, start + min(size, n)) % n
    return perm[idx]


def energies(det: Detector, graphs: list[GraphInstance]) -> tuple[np.ndarray, np.ndarray]:
    """(energies, logits) for a list of graphs."""
    dtype = next(det.head.parameters()).dtype
    with torch.no_grad():
        logits = det.logits(collate(graphs, dtype=dtype))
        e = energy(logits, det.cfg.temperature)
    return e.double().numpy(), logits.double().numpy()


def fit_threshold(det: Detector, graphs: list[GraphInstance]) -> float:
    """Set the cutoff at the 95th percentile of training InD energies."""
    e, _ = energies(det, graphs)
    det.cfg = replace(det.cfg, threshold=float(np.percentile(e, 95)))
    return det.cfg.threshold


def detect(det: Detector, g: GraphInstance) -> DetectionResult:
    e, logits = energies(det, [g])
    return decide(logits[0], det.cfg)


def decide(logits, cfg: EnergyConfig) -> DetectionResult:
    logits = np.asarray(logits, dtype=np.float64)
    e = float(energy(logits, cfg.temperature))
    return DetectionResult(logits, e, bool(e >= cfg.threshold), int(np.argmax(logits)))


def save_energy_sidecar(path, cfg: EnergyConfig) -> None:
    Path(path).write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True))


def load_energy_sidecar(path) -> EnergyConfig:
    return EnergyConfig(**json.loads(Path(path).read_text()))
