"""Experiment configuration and the end-to-end cohort -> graph -> model pipeline."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import platform
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import scipy

from . import __version__
from .ehr import CohortSpec, PatientRecord, SeverityBounds, generate_cohort, labels, load_cohort, severity_targets
from .encoding import FEATURE_DIM, EncodingSchema, encode_cohort, fit_schema
from .gnn import ARCHITECTURES, GraphOps, ModelParams, init_params, make_stack
from .metrics import MetricsReport, auc_roc, evaluate
from .similarity import PatientGraph, SimilarityParams, build_graph
from .training import TrainConfig, predict, split_dataset, train


class ConfigError(ValueError):
    pass


@dataclass
class CohortConfig:
    csv: Optional[str] = None
    n_patients: int = 500
    seed: int = 7
    mortality_rate: float = 0.2
    signal_strength: float = 1.0
    missing_rate: float = 0.1

    def spec(self) -> CohortSpec:
        return CohortSpec(self.n_patients, self.seed, self.mortality_rate, self.signal_strength, self.missing_rate)


@dataclass
class EncoderConfig:
    total_dim: int = FEATURE_DIM
    top_k_codes: Optional[int] = None


@dataclass
class SimilarityConfig:
    alpha: float = 0.7
    tau_percentile: float = 90.0
    tau_override: Optional[float] = None

    def params(self) -> SimilarityParams:
        return SimilarityParams(self.alpha, self.tau_percentile, self.tau_override)


@dataclass
class ModelConfig:
    architecture: str = "hybrid"
    hidden: int = 64
    heads: int = 4
    seed: int = 0


@dataclass
class AblationConfig:
    seeds: int = 5
    graph: bool = True
    architecture: bool = True


@dataclass
class ExperimentConfig:
    cohort: CohortConfig = field(default_factory=CohortConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    similarity: SimilarityConfig = field(default_factory=SimilarityConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: dict = field(default_factory=lambda: asdict(TrainConfig()))
    ablation: AblationConfig = field(default_factory=AblationConfig)
    threshold: float = 0.5
    out_dir: str = "runs/default"

    def train_config(self) -> TrainConfig:
        d = dict(self.train)
        d["split_fractions"] = tuple(d.get("split_fractions", (0.7, 0.15, 0.15)))
        try:
            return TrainConfig(**d)
        except (TypeError, ValueError) as err:
            raise ConfigError(f"train: {err}") from None

    def validate(self) -> None:
        if self.cohort.csv is not None:
            if not Path(self.cohort.csv).is_file():
                raise ConfigError(f"cohort.csv: file not found: {self.cohort.csv}")
        else:
            self.cohort.spec().validate()
        try:
            self.similarity.params()
        except ValueError as err:
            raise ConfigError(f"similarity: {err}") from None
        if self.model.architecture not in ARCHITECTURES:
            raise ConfigError(f"model.architecture must be one of {sorted(ARCHITECTURES)}")
        if self.model.hidden < 1 or self.model.heads < 1:
            raise ConfigError("model.hidden and model.heads must be >= 1")
        if self.ablation.seeds < 1:
            raise ConfigError("ablation.seeds must be >= 1")
        self.train_config()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = asdict(self.train_config())
        d["train"]["split_fractions"] = list(d["train"]["split_fractions"])
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def hash(self, exclude_out_dir: bool = True) -> str:
        d = self.to_dict()
        if exclude_out_dir:
            d.pop("out_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        sections = {"cohort": CohortConfig, "encoder": EncoderConfig, "similarity": SimilarityConfig,
                    "model": ModelConfig, "ablation": AblationConfig}
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in doc.items():
            if key in sections:
                try:
                    kwargs[key] = sections[key](**value)
                except TypeError as err:
                    raise ConfigError(f"{key}: {err}") from None
            elif key == "train":
                kwargs[key] = {**asdict(TrainConfig()), **value}
            else:
                kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as err:
            raise ConfigError(f"config file {path} is not valid JSON: {err}") from None
        return cls.from_dict(doc)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """One master seed for cohort generation, splits and initialisation."""
        return replace(
            self,
            cohort=replace(self.cohort, seed=seed),
            model=replace(self.model, seed=seed),
            train={**self.train, "seed": seed},
        )


# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    records: list
    ids: tuple
    y: np.ndarray
    severity: np.ndarray
    masks: tuple
    schema: EncodingSchema
    bounds: SeverityBounds
    X: np.ndarray


def load_records(cfg: ExperimentConfig) -> list[PatientRecord]:
    if cfg.cohort.csv is not None:
        return load_cohort(cfg.cohort.csv)
    return generate_cohort(cfg.cohort.spec())


def prepare(cfg: ExperimentConfig, records: Optional[list] = None) -> Dataset:
    """Split, fit the encoder and severity bounds on the training part, encode all."""
    records = load_records(cfg) if records is None else records
    y = labels(records)
    masks = split_dataset(len(records), y, cfg.train_config())
    train_records = [r for r, m in zip(records, masks[0]) if m]
    schema = fit_schema(train_records, cfg.encoder.top_k_codes, cfg.encoder.total_dim)
    bounds = SeverityBounds.fit(train_records)
    return Dataset(records, tuple(r.id for r in records), y, severity_targets(records, bounds),
                   masks, schema, bounds, encode_cohort(records, schema))


def make_graph(data: Dataset, params: SimilarityParams) -> PatientGraph:
    return build_graph(data.X, data.ids, data.schema, params)


def initial_params(cfg: ExperimentConfig, in_dim: int, architecture: Optional[str] = None) -> ModelParams:
    kinds = ARCHITECTURES[architecture or cfg.model.architecture]
    return init_params(make_stack(kinds, in_dim, cfg.model.hidden, cfg.model.heads), cfg.model.seed)


def fit(cfg: ExperimentConfig, data: Dataset, graph, architecture: Optional[str] = None, log=None):
    params = initial_params(cfg, data.X.shape[1], architecture)
    return train(data.X, graph, params, data.y, data.severity, data.masks, cfg.train_config(), log=log)


def assess(cfg: ExperimentConfig, data: Dataset, graph, params: ModelParams, split: int = 2):
    """Metrics on one split (0 train, 1 val, 2 test) plus the attention map."""
    y_hat, c_hat, attention = predict(data.X, graph, params, "eval")
    m = data.masks[split]
    report = evaluate(y_hat[m], data.y[m], c_hat[m], data.severity[m], cfg.threshold)
    return report, attention, y_hat


def train_auc(data: Dataset, graph, params: ModelParams) -> float:
    y_hat, _, _ = predict(data.X, graph, params, "eval")
    m = data.masks[0]
    return auc_roc(y_hat[m], data.y[m])


# ---------------------------------------------------------------------------
# ablations

GRAPH_VARIANTS = (
    ("no_graph_mlp", None),
    ("cosine_only", 1.0),
    ("jaccard_only", 0.0),
    ("hybrid_similarity", "config"),
)
ARCH_VARIANTS = (("gcn_only", "gcn"), ("sage_only", "sage"), ("gat_only", "gat"), ("hybrid_stack", "hybrid"))


@dataclass(frozen=True)
class Cell:
    study: str
    variant: str
    graph: str  # "none" or "alpha=<value>"
    architecture: str

    def key(self) -> tuple[str, str]:
        return self.graph, self.architecture


def ablation_cells(cfg: ExperimentConfig) -> list[Cell]:
    alpha = cfg.similarity.alpha
    cells = []
    if cfg.ablation.graph:
        for name, a in GRAPH_VARIANTS:
            g = "none" if a is None else f"alpha={alpha if a == 'config' else a}"
            cells.append(Cell("graph", name, g, "hybrid"))
    if cfg.ablation.architecture:
        for name, arch in ARCH_VARIANTS:
            cells.append(Cell("architecture", name, f"alpha={alpha}", arch))
    return cells


def cell_hash(cfg: ExperimentConfig, cell: Cell) -> str:
    d = cfg.to_dict()
    d.pop("out_dir")
    d.pop("ablation")
    d["cell"] = {"graph": cell.graph, "architecture": cell.architecture}
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def run_ablation(cfg: ExperimentConfig, log=None):
    """Per-seed test AUC/F1 for every ablation cell.

    Seed ``s`` draws its own cohort (when generated), split and initialisation;
    cells sharing (graph, architecture) are trained once per seed.
    Returns ``(summary_rows, per_seed_rows)``.
    """
    cells = ablation_cells(cfg)
    base = cfg.train_config().seed
    per_seed = []
    for k in range(cfg.ablation.seeds):
        scfg = cfg.with_seed(base + k)
        data = prepare(scfg)
        graphs: dict[str, object] = {}
        results: dict[tuple, MetricsReport] = {}
        for cell in cells:
            if cell.key() not in results:
                if cell.graph not in graphs:
                    if cell.graph == "none":
                        graphs[cell.graph] = GraphOps.empty(len(data.ids))
                    else:
                        alpha = float(cell.graph.split("=", 1)[1])
                        sim = replace(scfg.similarity, alpha=alpha).params()
                        graphs[cell.graph] = GraphOps.from_graph(make_graph(data, sim))
                ops = graphs[cell.graph]
                params, _ = fit(scfg, data, ops, cell.architecture)
                results[cell.key()], _, _ = assess(scfg, data, ops, params)
            rep = results[cell.key()]
            row = {"study": cell.study, "variant": cell.variant, "seed": base + k,
                   "auc": rep.auc_roc, "f1": rep.f1}
            per_seed.append(row)
            if log is not None:
                log(row)

    summary = []
    for cell in cells:
        rows = [r for r in per_seed if r["study"] == cell.study and r["variant"] == cell.variant]
        auc = np.array([r["auc"] for r in rows])
        f1 = np.array([r["f1"] for r in rows])
        summary.append({
            "study": cell.study, "variant": cell.variant, "graph": cell.graph,
            "architecture": cell.architecture, "n_seeds": len(rows),
            "auc_mean": float(auc.mean()), "auc_std": float(auc.std()),
            "f1_mean": float(f1.mean()), "f1_std": float(f1.std()),
            "config_hash": cell_hash(cfg, cell),
        })
    return summary, per_seed


SUMMARY_COLUMNS = ["study", "variant", "graph", "architecture", "n_seeds",
                   "auc_mean", "auc_std", "f1_mean", "f1_std", "config_hash"]


def rows_to_csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def ordering_report(summary: list[dict]) -> list[dict]:
    """Directional checks: hybrid stack vs single-kind stacks, hybrid graph vs single-similarity graphs."""
    by = {(r["study"], r["variant"]): r["auc_mean"] for r in summary}
    checks = []
    pairs = [("architecture", "hybrid_stack", v) for v in ("gcn_only", "sage_only", "gat_only")]
    pairs += [("graph", "hybrid_similarity", v) for v in ("cosine_only", "jaccard_only")]
    for study, ours, other in pairs:
        if (study, ours) in by and (study, other) in by:
            checks.append({"study": study, "ours": ours, "other": other,
                           "ours_auc": by[(study, ours)], "other_auc": by[(study, other)],
                           "holds": by[(study, ours)] >= by[(study, other)]})
    return checks


# ---------------------------------------------------------------------------
# manifests


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command: str, cfg: ExperimentConfig, inputs=(), outputs=()) -> Path:
    out_dir = Path(out_dir)
    path = out_dir / "manifest.json"
    existing = json.loads(path.read_text()) if path.is_file() else {"runs": []}
    existing["runs"].append({
        "command": command,
        "config_hash": cfg.hash(),
        "config": cfg.to_dict(),
        "versions": {"patientgraph": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "inputs": {str(p): sha256_file(p) for p in inputs if Path(p).is_file()},
        "outputs": {Path(p).name: sha256_file(p) for p in outputs if Path(p).is_file()},
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    })
    path.write_text(json.dumps(existing, indent=2) + "\n", encoding="utf-8")
    return path
