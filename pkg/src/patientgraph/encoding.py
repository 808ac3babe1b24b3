"""Fixed-width (133) node features: min-max continuous block, then binary block.

Layout, in order:

    continuous   age, charlson, 5 vitals x (mean, min, max), fluid volume   (18)
    one-hot      gender, ethnicity, admission type                          (cohort vocabularies)
    flags        interventions, medication categories
    diagnoses    top-K codes, K = whatever width remains to reach 133

Everything after the continuous block is 0/1 and forms the binary index range.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .ehr import INTERVENTIONS, STATS, VITALS, PatientRecord

FEATURE_DIM = 133


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class ContinuousSpec:
    name: str
    min: float
    max: float
    mean: float

    def __post_init__(self):
        if not self.min <= self.mean <= self.max:
            raise SchemaError(f"{self.name}: need min <= mean <= max, got {self.min}, {self.mean}, {self.max}")


@dataclass(frozen=True)
class EncodingSchema:
    continuous: tuple[ContinuousSpec, ...]
    categorical: tuple[tuple[str, tuple[str, ...]], ...]
    flags: tuple[str, ...]  # "intervention:<name>" / "med:<name>"
    codes: tuple[str, ...]

    @property
    def n_continuous(self) -> int:
        return len(self.continuous)

    @property
    def total_dim(self) -> int:
        return (
            self.n_continuous
            + sum(len(v) for _, v in self.categorical)
            + len(self.flags)
            + len(self.codes)
        )

    @property
    def continuous_range(self) -> range:
        return range(0, self.n_continuous)

    @property
    def binary_range(self) -> range:
        return range(self.n_continuous, self.total_dim)

    def index_of(self, kind: str, name: str) -> int:
        """Column of a named feature. ``kind`` is continuous/categorical:<field>/flag/code."""
        if kind == "continuous":
            return [c.name for c in self.continuous].index(name)
        off = self.n_continuous
        for field, vocab in self.categorical:
            if kind == f"categorical:{field}":
                return off + vocab.index(name)
            off += len(vocab)
        if kind == "flag":
            return off + self.flags.index(name)
        off += len(self.flags)
        if kind == "code":
            return off + self.codes.index(name)
        raise KeyError(kind)

    def to_json(self) -> str:
        doc = {
            "total_dim": self.total_dim,
            "continuous": [
                {"name": c.name, "min": c.min, "max": c.max, "mean": c.mean} for c in self.continuous
            ],
            "categorical": [{"name": f, "vocabulary": list(v)} for f, v in self.categorical],
            "flags": list(self.flags),
            "codes": list(self.codes),
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EncodingSchema":
        doc = json.loads(text)
        schema = cls(
            continuous=tuple(ContinuousSpec(c["name"], c["min"], c["max"], c["mean"]) for c in doc["continuous"]),
            categorical=tuple((c["name"], tuple(c["vocabulary"])) for c in doc["categorical"]),
            flags=tuple(doc["flags"]),
            codes=tuple(doc["codes"]),
        )
        if schema.total_dim != doc["total_dim"]:
            raise SchemaError(f"schema width {schema.total_dim} != declared {doc['total_dim']}")
        return schema

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def _continuous_values(rec: PatientRecord) -> list:
    vals = [rec.age_years, float(rec.charlson_index)]
    for v in VITALS:
        vals.extend(rec.vital_aggregates.get(v, (None, None, None)))
    vals.append(rec.fluid_input_ml)
    return vals


CONTINUOUS_NAMES = ["age", "charlson"] + [f"{v}_{s}" for v in VITALS for s in STATS] + ["fluid_ml"]
CATEGORICAL_FIELDS = ("gender", "ethnicity", "admission_type")


def fit_schema(train_cohort: Sequence[PatientRecord], top_k_codes: int | None = None,
               total_dim: int = FEATURE_DIM) -> EncodingSchema:
    """Fit normalization bounds, vocabularies and the diagnosis code list.

    ``top_k_codes`` defaults to the residual width after the continuous, one-hot
    and flag blocks. An explicit value that misses ``total_dim`` is an error.
    """
    if not train_cohort:
        raise SchemaError("cannot fit a schema on an empty cohort")

    columns = list(zip(*(_continuous_values(r) for r in train_cohort)))
    continuous = []
    for name, col in zip(CONTINUOUS_NAMES, columns):
        present = [float(x) for x in col if x is not None]
        if not present:
            raise SchemaError(f"continuous field {name} is missing for every training record")
        lo, hi = min(present), max(present)
        # float summation can push the mean of equal values just past the extremes
        mean = min(max(sum(present) / len(present), lo), hi)
        continuous.append(ContinuousSpec(name, lo, hi, mean))

    categorical = []
    for field in CATEGORICAL_FIELDS:
        vocab: list[str] = []
        for r in train_cohort:
            v = getattr(r, field)
            if v not in vocab:
                vocab.append(v)
        categorical.append((field, tuple(vocab)))

    meds: list[str] = []
    for r in train_cohort:
        for m in r.medication_flags:
            if m not in meds:
                meds.append(m)
    flags = tuple(f"intervention:{i}" for i in INTERVENTIONS) + tuple(f"med:{m}" for m in meds)

    fixed = len(continuous) + sum(len(v) for _, v in categorical) + len(flags)
    residual = total_dim - fixed
    k = residual if top_k_codes is None else top_k_codes
    counts = Counter(c for r in train_cohort for c in r.diagnosis_codes)
    ranked = sorted(counts, key=lambda c: (-counts[c], c))
    codes = tuple(ranked[:k]) if k > 0 else ()
    achieved = fixed + len(codes)
    if achieved != total_dim:
        raise SchemaError(
            f"encoding width {achieved} != {total_dim} (fixed blocks {fixed}, "
            f"{len(codes)} of {k} requested diagnosis codes available)"
        )
    return EncodingSchema(tuple(continuous), tuple(categorical), flags, codes)


def encode(record: PatientRecord, schema: EncodingSchema) -> np.ndarray:
    out = np.zeros(schema.total_dim)
    for i, (spec, x) in enumerate(zip(schema.continuous, _continuous_values(record))):
        value = spec.mean if x is None else float(x)
        span = spec.max - spec.min
        out[i] = min(max((value - spec.min) / span, 0.0), 1.0) if span > 0 else 0.0

    off = schema.n_continuous
    for field, vocab in schema.categorical:
        v = getattr(record, field)
        if v in vocab:
            out[off + vocab.index(v)] = 1.0
        off += len(vocab)

    for j, flag in enumerate(schema.flags):
        kind, name = flag.split(":", 1)
        source = record.intervention_flags if kind == "intervention" else record.medication_flags
        if source.get(name, False):
            out[off + j] = 1.0
    off += len(schema.flags)

    for j, code in enumerate(schema.codes):
        if code in record.diagnosis_codes:
            out[off + j] = 1.0
    return out


def encode_cohort(records: Sequence[PatientRecord], schema: EncodingSchema) -> np.ndarray:
    if not records:
        return np.zeros((0, schema.total_dim))
    return np.vstack([encode(r, schema) for r in records])


def split_binary_view(fv: np.ndarray, schema: EncodingSchema) -> frozenset[int]:
    """Indices in the binary range whose value is 1."""
    start = schema.n_continuous
    return frozenset(int(i) + start for i in np.flatnonzero(np.asarray(fv)[start:] == 1.0))


def check_feature_vector(fv: np.ndarray, schema: EncodingSchema) -> None:
    fv = np.asarray(fv)
    if fv.shape != (schema.total_dim,):
        raise SchemaError(f"feature vector has shape {fv.shape}, expected ({schema.total_dim},)")
    cont = fv[: schema.n_continuous]
    if np.any((cont < 0) | (cont > 1)):
        raise SchemaError("continuous entries must lie in [0, 1]")
    binary = fv[schema.n_continuous:]
    if np.any((binary != 0) & (binary != 1)):
        raise SchemaError("binary entries must be exactly 0 or 1")
