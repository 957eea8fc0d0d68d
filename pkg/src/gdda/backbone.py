"""GIN graph encoder, small MLP building blocks and the gradient contract."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .data import GraphInstance
from .errors import NumericError, ShapeError, UsageError


def glorot_uniform_(weight: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    fan_out, fan_in = weight.shape
    a = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        u = torch.rand(weight.shape, generator=generator, dtype=torch.float64)
        weight.copy_((2 * u - 1) * a)
    return weight


def make_linear(n_in: int, n_out: int, generator: torch.Generator) -> nn.Linear:
    layer = nn.Linear(n_in, n_out)
    glorot_uniform_(layer.weight, generator)
    nn.init.zeros_(layer.bias)
    return layer


class MLP(nn.Module):
    """Two affine maps with a ReLU between them."""

    def __init__(self, n_in: int, n_hidden: int, n_out: int, generator: torch.Generator):
        super().__init__()
        self.fc1 = make_linear(n_in, n_hidden, generator)
        self.fc2 = make_linear(n_hidden, n_out, generator)

    @property
    def in_features(self) -> int:
        return self.fc1.in_features

    @property
    def out_features(self) -> int:
        return self.fc2.out_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.fc1.in_features:
            raise ShapeError(f"expected width {self.fc1.in_features}, got {x.shape[-1]}")
        return self.fc2(torch.relu(self.fc1(x)))


@dataclass(frozen=True)
class GinConfig:
    in_dim: int = 8
    num_layers: int = 2
    hidden_dim: int = 32
    out_dim: int = 16
    epsilon: float = 0.0
    readout: str = "mean"

    def validate(self) -> None:
        if self.num_layers < 1:
            raise UsageError("num_layers must be >= 1")
        if self.readout not in ("sum", "mean"):
            raise UsageError(f"unknown readout {self.readout!r}")


@dataclass
class GraphBatch:
    """Disjoint union of graphs with a node-to-graph index."""

    x: torch.Tensor
    src: torch.Tensor
    dst: torch.Tensor
    graph_index: torch.Tensor
    num_graphs: int
    labels: torch.Tensor
    domains: torch.Tensor

    def __len__(self):
        return self.num_graphs


def collate(graphs: Sequence[GraphInstance], dtype=torch.float32) -> GraphBatch:
    xs, srcs, dsts, gidx = [], [], [], []
    offset = 0
    for i, g in enumerate(graphs):
        xs.append(g.node_features)
        u, v = np.nonzero(g.adjacency)
        srcs.append(u + offset)
        dsts.append(v + offset)
        gidx.append(np.full(g.num_nodes, i))
        offset += g.num_nodes
    if not graphs:
        raise UsageError("cannot collate an empty graph list")
    return GraphBatch(
        x=torch.as_tensor(np.concatenate(xs), dtype=dtype),
        src=torch.as_tensor(np.concatenate(srcs), dtype=torch.long),
        dst=torch.as_tensor(np.concatenate(dsts), dtype=torch.long),
        graph_index=torch.as_tensor(np.concatenate(gidx), dtype=torch.long),
        num_graphs=len(graphs),
        labels=torch.tensor([g.label for g in graphs], dtype=torch.long),
        domains=torch.tensor([g.domain for g in graphs], dtype=torch.long),
    )


class GIN(nn.Module):
    def __init__(self, cfg: GinConfig, generator: torch.Generator):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        widths = [cfg.in_dim] + [cfg.hidden_dim] * (cfg.num_layers - 1) + [cfg.out_dim]
        self.layers = nn.ModuleList(
            MLP(widths[i], cfg.hidden_dim, widths[i + 1], generator) for i in range(cfg.num_layers)
        )

    def forward(self, batch: GraphBatch) -> torch.Tensor:
        x = batch.x.to(self.layers[0].fc1.weight.dtype)
        for k, mlp in enumerate(self.layers):
            if x.shape[1] != mlp.in_features:
                raise ShapeError(f"GIN layer {k}: expected width {mlp.in_features}, got {x.shape[1]}")
            agg = torch.zeros_like(x).index_add_(0, batch.dst, x[batch.src])
            x = mlp((1.0 + self.cfg.epsilon) * x + agg)
            if k < len(self.layers) - 1:
                x = torch.relu(x)
        out = torch.zeros(batch.num_graphs, x.shape[1], dtype=x.dtype).index_add_(
            0, batch.graph_index, x
        )
        if self.cfg.readout == "mean":
            counts = torch.bincount(batch.graph_index, minlength=batch.num_graphs)
            out = out / counts.clamp(min=1).unsqueeze(1).to(x.dtype)
        return out


def gin_forward(model: GIN, g: GraphInstance) -> np.ndarray:
    """Graph-level representation of a single graph."""
    with torch.no_grad():
        return model(collate([g], dtype=model.layers[0].fc1.weight.dtype))[0].numpy()


class ClassifierHead(nn.Module):
    """Affine map to class logits, optionally through one hidden ReLU layer."""

    def __init__(self, in_dim: int, num_classes: int, generator: torch.Generator, hidden: int = 0):
        super().__init__()
        self.in_dim = in_dim
        if hidden:
            self.net = MLP(in_dim, hidden, num_classes, generator)
        else:
            self.net = make_linear(in_dim, num_classes, generator)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        if h.shape[-1] != self.in_dim:
            raise ShapeError(f"head expects width {self.in_dim}, got {h.shape[-1]}")
        return self.net(h)


def classify_head(head: ClassifierHead, h) -> np.ndarray:
    p = next(head.parameters())
    with torch.no_grad():
        return head(torch.as_tensor(h, dtype=p.dtype)).numpy()


def check_finite(name: str, value: torch.Tensor) -> torch.Tensor:
    if not torch.all(torch.isfinite(value)):
        raise NumericError(f"non-finite value in {name}")
    return value


def loss_and_gradients(
    objective: Callable[[nn.Module, object], torch.Tensor], model: nn.Module, batch
) -> tuple[float, dict[str, np.ndarray]]:
    """Scalar loss and exact gradients for every named parameter of ``model``."""
    if batch is None or (hasattr(batch, "__len__") and len(batch) == 0):
        raise UsageError("empty batch")
    model.zero_grad(set_to_none=True)
    loss = objective(model, batch)
    check_finite("objective", loss)
    params = dict(model.named_parameters())
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    out = {}
    for (name, p), g in zip(params.items(), grads):
        out[name] = np.zeros(p.shape) if g is None else g.detach().numpy().copy()
    return float(loss.detach()), out


def make_optimizer(params, lr: float = 1e-3) -> torch.optim.Optimizer:
    return torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999))


def seeded_generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed))
