"""Config-driven orchestration of the two-phase pipeline.

Every stage writes its artifacts to ``<stage_cache>/<stage>-<key>/`` where
the key hashes all configuration the stage depends on, so ablations, the
energy baseline and lambda sweeps reuse upstream checkpoints.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import shutil
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .backbone import GIN, ClassifierHead, GinConfig, collate
from .data import BenchmarkSpec, DatasetSplit, generate_benchmark, load_dataset, save_dataset
from .detector import (Detector, EnergyConfig, energies, load_energy_sidecar, save_energy_sidecar,
                       train_detector)
from .diffusion import (DiffusionSchedule, PerturbationConfig, ScoreNet, generate_pseudo, load_pseudo,
                        reverse_sample, save_pseudo, train_score)
from .disentangle import Disentangler, DisentanglerConfig, train_phase1, write_log_csv
from .errors import ConfigError, GddaError, MissingArtifactError, UsageError
from .metrics import ScoredSet, project_2d, summarize, write_projection_csv

log = logging.getLogger("gdda")

ABLATIONS = ("none", "no_pseudo_ind", "no_pseudo_ood")
METHODS = ("gdda", "energy_baseline")
STAGES = ("data", "phase1", "score", "pseudo", "detector")


@dataclass(frozen=True)
class Epochs:
    phase1: int = 150
    score: int = 1500
    detector: int = 150


@dataclass(frozen=True)
class ExperimentConfig:
    benchmark: BenchmarkSpec = field(default_factory=BenchmarkSpec)
    gin: GinConfig = field(default_factory=GinConfig)
    d1: int = 8
    d2: int = 8
    beta1: float = 1.0
    beta2: float = 1.0
    schedule: DiffusionSchedule = field(default_factory=DiffusionSchedule)
    lambda_c: float = 0.1
    lambda_s: float = 0.05
    energy: EnergyConfig = field(default_factory=EnergyConfig)
    epochs: Epochs = field(default_factory=Epochs)
    lr: float = 1e-3
    batch_size: int = 64
    score_hidden: int = 128
    head_hidden: int = 64
    train_backbone: bool = False
    n_pseudo: int | None = None
    seed: int = 0
    seeds: tuple[int, ...] = ()
    output_dir: str = "runs/default"
    ablation: str = "none"

    def validate(self) -> None:
        if self.d1 + self.d2 != self.gin.out_dim:
            raise ConfigError(f"d1 + d2 = {self.d1 + self.d2} must equal gin.out_dim = {self.gin.out_dim}")
        if self.gin.in_dim != self.benchmark.d_in:
            raise ConfigError(f"gin.in_dim = {self.gin.in_dim} but the benchmark has d_in = {self.benchmark.d_in}")
        if min(self.epochs.phase1, self.epochs.score, self.epochs.detector) < 0:
            raise ConfigError("stage epoch counts must be >= 0")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}")
        for name in ("lambda_c", "lambda_s"):
            if not 0 < getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in (0, 1]")
        try:
            self.benchmark.validate()
            self.gin.validate()
            self.schedule.validate()
            self.energy.validate()
        except GddaError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return _build(cls, data, "config")

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("seeds")
        return _digest(d)


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = _default_of(known[name])
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}")
        elif isinstance(default, tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _default_of(f):
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return f.default


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def stage_seed(seed: int, stage: str) -> int:
    return int(np.random.SeedSequence([int(seed), STAGES.index(stage) + 1]).generate_state(1)[0])


def stage_generator(seed: int, stage: str) -> torch.Generator:
    return torch.Generator().manual_seed(stage_seed(seed, stage))


class Pipeline:
    """Runs or loads each stage for one (config, seed)."""

    def __init__(self, cfg: ExperimentConfig, stage_cache=None, compute_missing: bool = True):
        cfg.validate()
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self.cache = Path(stage_cache) if stage_cache else self.out / "stages"
        self.compute_missing = compute_missing
        self.records: list[dict] = []
        self._memo: dict = {}

    # ---- keys -------------------------------------------------------------
    def key(self, stage: str, method: str = "gdda") -> str:
        c = self.cfg.to_dict()
        parts = {"data": {"benchmark": c["benchmark"], "seed": c["seed"]}}
        parts["phase1"] = {**parts["data"], **{k: c[k] for k in ("gin", "d1", "d2", "beta1", "beta2", "lr", "batch_size")},
                           "epochs": c["epochs"]["phase1"]}
        parts["score"] = {**parts["phase1"], "schedule": c["schedule"], "score_hidden": c["score_hidden"],
                          "score_epochs": c["epochs"]["score"]}
        parts["pseudo"] = {**parts["score"], **{k: c[k] for k in ("lambda_c", "lambda_s", "n_pseudo")}}
        det = {k: c[k] for k in ("energy", "head_hidden", "train_backbone")}
        det["det_epochs"] = c["epochs"]["detector"]
        if method == "energy_baseline":
            parts["detector"] = {**parts["phase1"], **det, "method": method}
        else:
            parts["detector"] = {**parts["pseudo"], **det, "method": method, "ablation": c["ablation"]}
        return _digest(parts[stage])[:16]

    def stage_dir(self, stage: str, method: str = "gdda") -> Path:
        return self.cache / f"{stage}-{self.key(stage, method)}"

    def _run_stage(self, stage, method, compute, load, force=False):
        memo_key = (stage, method)
        if memo_key in self._memo:
            return self._memo[memo_key]
        d = self.stage_dir(stage, method)
        t0 = time.perf_counter()
        if (d / "done.json").exists():
            result = load(d)
            cached = True
        elif self.compute_missing or force:
            tmp = d.with_name(d.name + ".tmp")
            shutil.rmtree(tmp, ignore_errors=True)
            tmp.mkdir(parents=True)
            log.info("stage %s: computing into %s", stage, d)
            try:
                result = compute(tmp)
            except GddaError as exc:
                raise type(exc)(f"stage {stage}: {exc}") from exc
            files = sorted(p.name for p in tmp.iterdir())
            (tmp / "done.json").write_text(json.dumps({"stage": stage, "files": files}))
            shutil.rmtree(d, ignore_errors=True)
            tmp.rename(d)
            cached = False
        else:
            raise MissingArtifactError(f"stage {stage}: missing artifact {d / 'done.json'}")
        self.records.append({
            "stage": stage,
            "method": method,
            "dir": str(d),
            "cached": cached,
            "seconds": round(time.perf_counter() - t0, 4),
            "digests": {p.name: ckpt.file_digest(p) for p in sorted(d.iterdir()) if p.is_file()},
        })
        self._memo[memo_key] = result
        return result

    # ---- stages -----------------------------------------------------------
    def data(self, force=False) -> DatasetSplit:
        spec = replace(self.cfg.benchmark, seed=self.cfg.seed)

        def compute(d):
            split = generate_benchmark(spec)
            save_dataset(split, d / "dataset.jsonl")
            return split

        return self._run_stage("data", "gdda", compute, lambda d: load_dataset(d / "dataset.jsonl"), force)

    def _fresh_phase1(self, num_classes):
        gen = stage_generator(self.cfg.seed, "phase1")
        backbone = GIN(self.cfg.gin, gen)
        dis = Disentangler(self.cfg.gin.out_dim, num_classes,
                           DisentanglerConfig(self.cfg.d1, self.cfg.d2, self.cfg.beta1, self.cfg.beta2), gen)
        return backbone, dis, gen

    def phase1(self, force=False):
        split = self.data()
        backbone, dis, gen = self._fresh_phase1(split.num_classes)
        sections = {"backbone": backbone, "enc_c": dis.enc_c, "enc_s": dis.enc_s, "dec": dis.dec, "phi": dis.phi}

        def compute(d):
            train_log = train_phase1(dis, split.train, self.cfg.epochs.phase1, gen, backbone=backbone,
                                     lr=self.cfg.lr, batch_size=self.cfg.batch_size)
            write_log_csv(train_log, d / "phase1_log.csv", ["epoch", "L_recon", "L_sim", "L_cls", "L_total"])
            ckpt.save_checkpoint(d / "phase1", sections, self.cfg.seed, self.cfg.to_dict())
            return self._reload_phase1(d)

        return self._run_stage("phase1", "gdda", compute, self._reload_phase1, force)

    def _reload_phase1(self, d):
        split = self.data()
        backbone, dis, _ = self._fresh_phase1(split.num_classes)
        ckpt.load_checkpoint(d / "phase1",
                             {"backbone": backbone, "enc_c": dis.enc_c, "enc_s": dis.enc_s, "dec": dis.dec, "phi": dis.phi})
        for p in list(backbone.parameters()) + list(dis.parameters()):
            p.requires_grad_(False)
        return backbone, dis

    def train_factors(self):
        split = self.data()
        backbone, dis = self.phase1()
        with torch.no_grad():
            h = backbone(collate(split.train))
            return dis.encode(h)

    def _fresh_score(self):
        gen = stage_generator(self.cfg.seed, "score")
        return ScoreNet(self.cfg.d1, self.cfg.d2, self.cfg.schedule, gen, hidden=self.cfg.score_hidden), gen

    def score(self, force=False) -> ScoreNet:
        def compute(d):
            c, s = self.train_factors()
            net, gen = self._fresh_score()
            train_log = train_score(net, c, s, self.cfg.epochs.score, gen, lr=self.cfg.lr)
            write_log_csv(train_log, d / "score_log.csv", ["epoch", "dsm_loss"])
            ckpt.save_checkpoint(d / "score", {"score": net}, self.cfg.seed, self.cfg.to_dict())
            return self._reload_score(d)

        return self._run_stage("score", "gdda", compute, self._reload_score, force)

    def _reload_score(self, d):
        net, _ = self._fresh_score()
        ckpt.load_checkpoint(d / "score", {"score": net})
        for p in net.parameters():
            p.requires_grad_(False)
        return net

    def n_pseudo(self) -> int:
        return self.cfg.n_pseudo if self.cfg.n_pseudo is not None else len(self.data().train)

    def pseudo(self, force=False):
        def compute(d):
            net = self.score()
            _, dis = self.phase1()
            ind, ood, _ = generate_pseudo(net, self.cfg.schedule, dis, self.cfg.lambda_c, self.cfg.lambda_s,
                                          self.n_pseudo(), stage_seed(self.cfg.seed, "pseudo"))
            save_pseudo(d / "pseudo.jsonl", ind.double().numpy(), ood.double().numpy(),
                        self.cfg.lambda_c, self.cfg.lambda_s)
            return self._reload_pseudo(d)

        return self._run_stage("pseudo", "gdda", compute, self._reload_pseudo, force)

    def _reload_pseudo(self, d):
        ind, ood = load_pseudo(d / "pseudo.jsonl")
        width = self.cfg.gin.out_dim
        return ind.reshape(-1, width), ood.reshape(-1, width)

    def _fresh_detector(self, num_classes):
        backbone, _ = self.phase1()
        gen = stage_generator(self.cfg.seed, "detector")
        if self.cfg.train_backbone:
            backbone = _clone_trainable(backbone)
        head = ClassifierHead(self.cfg.gin.out_dim, num_classes, gen, hidden=self.cfg.head_hidden)
        return Detector(backbone, head, self.cfg.energy, train_backbone=self.cfg.train_backbone), gen

    def detector(self, method: str = "gdda", force=False) -> Detector:
        if method not in METHODS:
            raise UsageError(f"unknown method {method!r}")
        split = self.data()

        def compute(d):
            det, gen = self._fresh_detector(split.num_classes)
            width = self.cfg.gin.out_dim
            empty = np.zeros((0, width))
            if method == "energy_baseline":
                ind, ood = empty, empty
            else:
                ind, ood = self.pseudo()
                if self.cfg.ablation == "no_pseudo_ind":
                    ind = empty
                elif self.cfg.ablation == "no_pseudo_ood":
                    ood = empty
            train_log = train_detector(det, split.train, ind, ood, self.cfg.epochs.detector, gen,
                                       lr=self.cfg.lr, batch_size=self.cfg.batch_size)
            write_log_csv(train_log, d / "detector_log.csv", ["epoch", "objective", "worst_ce", "l_energy"])
            ckpt.save_checkpoint(d / "detector", {"backbone": det.backbone, "head": det.head},
                                 self.cfg.seed, self.cfg.to_dict())
            save_energy_sidecar(d / "detector_energy.json", det.cfg)
            return self._reload_detector(d)

        return self._run_stage("detector", method, compute, self._reload_detector, force)

    def _reload_detector(self, d):
        det, _ = self._fresh_detector(self.data().num_classes)
        ckpt.load_checkpoint(d / "detector", {"backbone": det.backbone, "head": det.head})
        det.cfg = load_energy_sidecar(d / "detector_energy.json")
        for p in det.parameters():
            p.requires_grad_(False)
        return det

    def evaluate(self, method: str = "gdda", force=False) -> dict:
        split = self.data()
        det = self.detector(method, force=force)
        if not split.test_ind or not split.test_ood:
            raise UsageError("evaluation needs nonempty test_ind and test_ood sets")
        e_ind, logits_ind = energies(det, split.test_ind)
        e_ood, _ = energies(det, split.test_ood)
        correct = logits_ind.argmax(1) == np.array([g.label for g in split.test_ind])
        report = summarize(ScoredSet(e_ind, e_ood, correct))
        report.update({
            "seed": self.cfg.seed,
            "config_hash": self.cfg.hash(),
            "method": method,
            "ablation": self.cfg.ablation if method == "gdda" else "none",
        })
        return report

    # ---- outputs ----------------------------------------------------------
    def metrics_path(self, method: str = "gdda") -> Path:
        if method == "energy_baseline":
            return self.out / "metrics_energy_baseline.json"
        if self.cfg.ablation != "none":
            return self.out / f"metrics_{self.cfg.ablation}.json"
        return self.out / "metrics.json"

    def write_metrics(self, report: dict, method: str = "gdda") -> Path:
        path = self.metrics_path(method)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        return path

    def write_manifest(self, status: str = "ok", error: str | None = None, name: str = "run_manifest.json") -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        manifest = {
            "config_hash": self.cfg.hash(),
            "seed": self.cfg.seed,
            "written_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "status": status,
            "error": error,
            "stages": self.records,
            "config": self.cfg.to_dict(),
        }
        path = self.out / name
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return path

    def mirror_stages(self) -> None:
        """Copy stage artifacts into output_dir when the cache lives elsewhere."""
        dest = self.out / "stages"
        if self.cache.resolve() == dest.resolve():
            return
        for rec in self.records:
            src = Path(rec["dir"])
            shutil.copytree(src, dest / src.name, dirs_exist_ok=True)


def _clone_trainable(module):
    import copy

    clone = copy.deepcopy(module)
    for p in clone.parameters():
        p.requires_grad_(True)
    return clone


def _guarded(pipe: Pipeline, fn):
    try:
        result = fn()
    except GddaError as exc:
        pipe.write_manifest(status="error", error=str(exc))
        raise
    pipe.mirror_stages()
    pipe.write_manifest()
    return result


def run_pipeline(cfg: ExperimentConfig, stage_cache=None, method: str = "gdda") -> Path:
    """Run every stage for one seed and write the metrics report; returns its path."""
    pipe = Pipeline(cfg, stage_cache)

    def go():
        return pipe.write_metrics(pipe.evaluate(method), method)

    return _guarded(pipe, go)


def run_baseline_energy(cfg: ExperimentConfig, stage_cache=None) -> Path:
    return run_pipeline(cfg, stage_cache, method="energy_baseline")


def run_stage(cfg: ExperimentConfig, stage: str, stage_cache=None) -> Pipeline:
    """Compute one stage; upstream artifacts must already exist."""
    pipe = Pipeline(cfg, stage_cache, compute_missing=False)
    targets = {"data": pipe.data, "phase1": pipe.phase1, "score": pipe.score,
               "pseudo": pipe.pseudo, "detector": pipe.detector}

    def go():
        if stage == "eval":
            return pipe.write_metrics(pipe.evaluate())
        return targets[stage](force=True)

    _guarded(pipe, go)
    return pipe


def centroid_distances(c, s, c_ref, s_ref) -> tuple[float, float]:
    cc = np.asarray(c_ref).mean(0)
    sc = np.asarray(s_ref).mean(0)
    return (float(np.linalg.norm(np.asarray(c) - cc, axis=1).mean()),
            float(np.linalg.norm(np.asarray(s) - sc, axis=1).mean()))


def run_lambda_sweep(cfg: ExperimentConfig, lambda_values, stage_cache=None, compute_missing=True) -> dict:
    """Sample factors at each lambda (lambda_c = lambda_s = lambda) and report
    the mean distance to the training-factor centroids."""
    lambda_values = [float(v) for v in lambda_values]
    if not lambda_values:
        raise UsageError("lambda sweep needs at least one value")
    pipe = Pipeline(cfg, stage_cache, compute_missing=compute_missing)

    def go():
        net = pipe.score()
        _, dis = pipe.phase1()
        c_tr, s_tr = pipe.train_factors()
        split = pipe.data()
        backbone, _ = pipe.phase1()
        with torch.no_grad():
            h_tr = backbone(collate(split.train)).double().numpy()
        n = pipe.n_pseudo()
        sweep_dir = pipe.out / "sweep"
        sweep_dir.mkdir(parents=True, exist_ok=True)
        rows = []
        for k, lam in enumerate(lambda_values):
            seed = stage_seed(cfg.seed, "pseudo") + 7919 * (k + 1)
            c, s = reverse_sample(net, cfg.schedule, PerturbationConfig(lam, lam, n, seed=seed))
            dc, ds = centroid_distances(c.double().numpy(), s.double().numpy(), c_tr.numpy(), s_tr.numpy())
            rows.append({"lambda": lam, "mean_distance_c": dc, "mean_distance_s": ds})
            c_ind, s_ind = reverse_sample(net, cfg.schedule, PerturbationConfig(0.0, lam, n, seed=seed + 1))
            with torch.no_grad():
                h_ind = dis.decode((c_ind, s_ind)).double().numpy()
                h_ood = dis.decode((c, s)).double().numpy()
            proj = project_2d({"original": h_tr, "pseudo_ind": h_ind, "pseudo_ood": h_ood})
            write_projection_csv(proj, sweep_dir / f"projection_lambda_{lam:g}.csv")
        with open(sweep_dir / "sweep.csv", "w") as fh:
            fh.write("lambda,mean_distance_c,mean_distance_s\n")
            for r in rows:
                fh.write(f"{r['lambda']!r},{r['mean_distance_c']!r},{r['mean_distance_s']!r}\n")
        report = {"seed": cfg.seed, "config_hash": cfg.hash(), "rows": rows}
        (sweep_dir / "sweep.json").write_text(json.dumps(report, indent=2, sort_keys=True))
        return report

    return _guarded(pipe, go)


def run_seeds(cfg: ExperimentConfig, seeds, method: str = "gdda", stage_cache=None) -> dict:
    """Run one method over several seeds; returns per-seed reports and mean/std."""
    seeds = list(seeds)
    if not seeds:
        raise UsageError("no seeds given")
    reports = []
    for s in seeds:
        sub = replace(cfg, seed=int(s), output_dir=str(Path(cfg.output_dir) / f"seed-{s}"))
        cache = Path(stage_cache) / f"seed-{s}" if stage_cache else None
        path = run_pipeline(sub, cache, method=method)
        reports.append(json.loads(path.read_text()))
    agg = {"method": method, "ablation": cfg.ablation if method == "gdda" else "none",
           "seeds": seeds, "config_hash": cfg.hash(), "per_seed": reports}
    for k in ("auroc", "aupr", "fpr95", "ind_acc"):
        vals = np.array([r[k] for r in reports], dtype=float)
        agg[f"{k}_mean"] = float(vals.mean())
        agg[f"{k}_std"] = float(vals.std())
    return agg


def write_json(obj, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path
