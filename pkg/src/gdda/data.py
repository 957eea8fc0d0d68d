"""Graph instances, the synthetic shifted-graph benchmark, and JSONL I/O.

Classes are encoded by topology (motif families) plus a one-hot class
signature in the node features; domains are encoded by an additive
per-domain style offset on every node feature.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import DatasetFormatError, UsageError, ValidationError

SCHEMA = "gdda-graphs/1"
SPLITS = ("train", "test_ind", "test_ood")


@dataclass(frozen=True, eq=False)
class GraphInstance:
    node_features: np.ndarray
    adjacency: np.ndarray
    label: int
    domain: int
    instance_id: str

    def __post_init__(self):
        x = np.array(self.node_features, dtype=np.float64)
        a = np.array(self.adjacency, dtype=np.int8)
        if x.ndim != 2 or a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValidationError(f"{self.instance_id}: bad feature/adjacency rank")
        if x.shape[0] != a.shape[0]:
            raise ValidationError(
                f"{self.instance_id}: {x.shape[0]} feature rows for {a.shape[0]} nodes"
            )
        if not np.array_equal(a, a.T):
            raise ValidationError(f"{self.instance_id}: adjacency is not symmetric")
        if np.any(np.diag(a) != 0):
            raise ValidationError(f"{self.instance_id}: adjacency has self-loops")
        if not np.all((a == 0) | (a == 1)):
            raise ValidationError(f"{self.instance_id}: adjacency is not 0/1")
        if not np.all(np.isfinite(x)):
            raise ValidationError(f"{self.instance_id}: non-finite node features")
        x.setflags(write=False)
        a.setflags(write=False)
        object.__setattr__(self, "node_features", x)
        object.__setattr__(self, "adjacency", a)
        object.__setattr__(self, "label", int(self.label))
        object.__setattr__(self, "domain", int(self.domain))

    @property
    def num_nodes(self) -> int:
        return self.adjacency.shape[0]

    def edges(self) -> list[tuple[int, int]]:
        """Undirected edge list with u < v."""
        u, v = np.nonzero(np.triu(self.adjacency, k=1))
        return list(zip(u.tolist(), v.tolist()))

    def permuted(self, perm) -> "GraphInstance":
        perm = np.asarray(perm)
        return GraphInstance(
            self.node_features[perm],
            self.adjacency[np.ix_(perm, perm)],
            self.label,
            self.domain,
            self.instance_id,
        )

    def __eq__(self, other):
        if not isinstance(other, GraphInstance):
            return NotImplemented
        return (
            self.instance_id == other.instance_id
            and self.label == other.label
            and self.domain == other.domain
            and np.array_equal(self.adjacency, other.adjacency)
            and np.array_equal(self.node_features, other.node_features)
        )

    __hash__ = None


@dataclass(frozen=True)
class BenchmarkSpec:
    known_classes: tuple[int, ...] = (0, 1, 2)
    unknown_classes: tuple[int, ...] = (3,)
    train_domains: tuple[int, ...] = (0, 1)
    test_domains: tuple[int, ...] = (2,)
    graphs_per_cell: int = 60
    nodes_min: int = 6
    nodes_max: int = 12
    style_vectors: tuple[tuple[float, ...], ...] = (
        (0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.5),
        (0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.5),
        (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, -0.5),
    )
    noise_scale: float = 0.3
    seed: int = 0
    signature_scale: float = 1.0

    def __post_init__(self):
        for name in ("known_classes", "unknown_classes", "train_domains", "test_domains"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        object.__setattr__(
            self, "style_vectors", tuple(tuple(float(v) for v in s) for s in self.style_vectors)
        )

    @property
    def num_classes(self) -> int:
        return max(self.known_classes + self.unknown_classes) + 1

    @property
    def num_domains(self) -> int:
        return len(self.style_vectors)

    @property
    def d_in(self) -> int:
        return len(self.style_vectors[0]) if self.style_vectors else 0

    def validate(self) -> None:
        if set(self.known_classes) & set(self.unknown_classes):
            raise UsageError("known and unknown classes overlap")
        if set(self.train_domains) & set(self.test_domains):
            raise UsageError("train and test domains overlap")
        if not self.known_classes:
            raise UsageError("no known classes")
        if min(self.known_classes + self.unknown_classes) < 0:
            raise UsageError("negative class index")
        if self.graphs_per_cell < 1:
            raise UsageError("graphs_per_cell must be >= 1")
        if not 1 <= self.nodes_min <= self.nodes_max:
            raise UsageError("need 1 <= nodes_min <= nodes_max")
        if self.noise_scale < 0:
            raise UsageError("noise_scale must be nonnegative")
        if len({len(s) for s in self.style_vectors}) > 1:
            raise UsageError("style vectors differ in length")
        domains = self.train_domains + self.test_domains
        if domains and not 0 <= min(domains) <= max(domains) < self.num_domains:
            raise UsageError("domain index without a style vector")
        if self.d_in < self.num_classes:
            raise UsageError(
                f"d_in={self.d_in} is smaller than the class signature length {self.num_classes}"
            )


@dataclass
class DatasetSplit:
    train: list[GraphInstance] = field(default_factory=list)
    test_ind: list[GraphInstance] = field(default_factory=list)
    test_ood: list[GraphInstance] = field(default_factory=list)
    d_in: int = 0
    num_classes: int = 0
    num_domains: int = 0

    def items(self) -> Iterator[tuple[str, list[GraphInstance]]]:
        yield "train", self.train
        yield "test_ind", self.test_ind
        yield "test_ood", self.test_ood

    def __len__(self):
        return len(self.train) + len(self.test_ind) + len(self.test_ood)


def class_signature(label: int, d_in: int, scale: float = 1.0) -> np.ndarray:
    sig = np.zeros(d_in)
    sig[label] = scale
    return sig


def motif_adjacency(label: int, n: int) -> np.ndarray:
    """Topology for class ``label`` on ``n`` nodes.

    0 cycle, 1 path, 2 complete, 3 star, k >= 4 cycle plus k chords.
    """
    a = np.zeros((n, n), dtype=np.int8)

    def link(u, v):
        a[u, v] = a[v, u] = 1

    if label == 1 or (label == 0 and n < 3):
        for i in range(n - 1):
            link(i, i + 1)
    elif label == 0:
        for i in range(n):
            link(i, (i + 1) % n)
    elif label == 2:
        a[:] = 1
        np.fill_diagonal(a, 0)
    elif label == 3:
        for i in range(1, n):
            link(0, i)
    else:
        for i in range(n):
            if i != (i + 1) % n:
                link(i, (i + 1) % n)
        added = 0
        for offset in range(n // 2, 1, -1):
            for i in range(n):
                if added == label:
                    break
                j = (i + offset) % n
                if i != j and not a[i, j]:
                    link(i, j)
                    added += 1
        if added < label:
            raise UsageError(f"{n} nodes cannot carry {label} chords for class {label}")
    return a


def _instance_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _cells(spec: BenchmarkSpec):
    yield "train", spec.known_classes, spec.train_domains
    yield "test_ind", spec.known_classes, spec.test_domains
    yield "test_ood", spec.unknown_classes, spec.test_domains


def generate_benchmark(spec: BenchmarkSpec) -> DatasetSplit:
    spec.validate()
    d_in = spec.d_in
    styles = np.array(spec.style_vectors, dtype=np.float64)
    out = DatasetSplit(d_in=d_in, num_classes=spec.num_classes, num_domains=spec.num_domains)
    index = 0
    for split, classes, domains in _cells(spec):
        bucket = getattr(out, split)
        for label in classes:
            for domain in domains:
                for r in range(spec.graphs_per_cell):
                    rng = _instance_rng(spec.seed, index)
                    n = int(rng.integers(spec.nodes_min, spec.nodes_max + 1))
                    base = class_signature(label, d_in, spec.signature_scale) + styles[domain]
                    x = base + spec.noise_scale * rng.standard_normal((n, d_in))
                    bucket.append(
                        GraphInstance(
                            x, motif_adjacency(label, n), label, domain,
                            f"{split}-c{label}-d{domain}-{r}",
                        )
                    )
                    index += 1
    return out


def save_dataset(split: DatasetSplit, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        header = {
            "schema": SCHEMA,
            "d_in": split.d_in,
            "num_classes": split.num_classes,
            "num_domains": split.num_domains,
        }
        fh.write(json.dumps(header) + "\n")
        for name, graphs in split.items():
            for g in graphs:
                rec = {
                    "instance_id": g.instance_id,
                    "split": name,
                    "label": g.label,
                    "domain": g.domain,
                    "num_nodes": g.num_nodes,
                    "node_features": g.node_features.tolist(),
                    "edges": [list(e) for e in g.edges()],
                }
                fh.write(json.dumps(rec) + "\n")


def _graph_from_record(rec: dict, lineno: int) -> tuple[str, GraphInstance]:
    try:
        iid = str(rec["instance_id"])
        split = rec["split"]
        n = int(rec["num_nodes"])
        x = np.array(rec["node_features"], dtype=np.float64).reshape(n, -1)
        edges = rec["edges"]
        label, domain = int(rec["label"]), int(rec["domain"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"line {lineno}: malformed graph record ({exc})") from exc
    if split not in SPLITS:
        raise DatasetFormatError(f"line {lineno}: unknown split {split!r}")
    a = np.zeros((n, n), dtype=np.int8)
    for e in edges:
        try:
            u, v = int(e[0]), int(e[1])
        except (TypeError, ValueError, IndexError) as exc:
            raise DatasetFormatError(f"line {lineno}: malformed edge {e!r}") from exc
        if not (0 <= u < v < n):
            raise ValidationError(f"{iid}: edge {e!r} violates u < v < num_nodes")
        a[u, v] = a[v, u] = 1
    return split, GraphInstance(x, a, label, domain, iid)


def load_dataset(path) -> DatasetSplit:
    out = DatasetSplit()
    header = None
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"line {lineno}: {exc.msg}") from exc
            if not isinstance(rec, dict):
                raise DatasetFormatError(f"line {lineno}: record is not an object")
            if header is None:
                if rec.get("schema") != SCHEMA:
                    raise DatasetFormatError(f"line {lineno}: missing {SCHEMA} header")
                header = rec
                out.d_in = int(rec["d_in"])
                out.num_classes = int(rec["num_classes"])
                out.num_domains = int(rec["num_domains"])
                continue
            split, g = _graph_from_record(rec, lineno)
            if g.node_features.shape[1] != out.d_in:
                raise ValidationError(f"{g.instance_id}: feature width != d_in={out.d_in}")
            if not 0 <= g.label < out.num_classes:
                raise ValidationError(f"{g.instance_id}: label {g.label} out of range")
            if not 0 <= g.domain < out.num_domains:
                raise ValidationError(f"{g.instance_id}: domain {g.domain} out of range")
            getattr(out, split).append(g)
    return out
