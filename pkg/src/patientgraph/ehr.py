"""Patient records, synthetic cohorts, CSV ingestion and the severity proxy."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

VITALS = ("hr", "bp", "glucose", "creatinine", "lactate")
STATS = ("mean", "min", "max")
INTERVENTIONS = ("ventilation", "dialysis")
MEDICATIONS = (
    "vasopressors",
    "sedatives",
    "antibiotics",
    "anticoagulants",
    "insulin",
    "diuretics",
)

GENDERS = ("M", "F")
ETHNICITIES = ("WHITE", "BLACK", "HISPANIC", "ASIAN", "OTHER")
ADMISSION_TYPES = ("EMERGENCY", "URGENT", "ELECTIVE")

Triple = tuple[Optional[float], Optional[float], Optional[float]]


class ValidationError(ValueError):
    """Invalid input, tagged with the offending field (and CSV row when known)."""

    def __init__(self, message: str, field: str | None = None, row: int | None = None):
        super().__init__(message)
        self.field = field
        self.row = row


@dataclass(frozen=True)
class PatientRecord:
    id: str
    age_years: float
    gender: str
    ethnicity: str
    admission_type: str
    diagnosis_codes: frozenset[str]
    charlson_index: int
    vital_aggregates: Mapping[str, Triple]
    intervention_flags: Mapping[str, bool]
    fluid_input_ml: Optional[float]
    medication_flags: Mapping[str, bool]
    los_days: float
    died_in_icu: bool
    num_interventions: int

    def __post_init__(self):
        object.__setattr__(self, "diagnosis_codes", frozenset(self.diagnosis_codes))
        validate_record(self)


def validate_record(rec: PatientRecord) -> None:
    if not rec.id:
        raise ValidationError("id must be non-empty", field="id")
    if not (rec.age_years >= 0):
        raise ValidationError(f"age_years must be >= 0, got {rec.age_years}", field="age")
    if not (rec.los_days > 0):
        raise ValidationError(f"los_days must be > 0, got {rec.los_days}", field="los_days")
    if rec.charlson_index < 0:
        raise ValidationError("charlson_index must be >= 0", field="charlson")
    if rec.num_interventions < 0:
        raise ValidationError("num_interventions must be >= 0", field="num_interventions")
    if rec.fluid_input_ml is not None and rec.fluid_input_ml < 0:
        raise ValidationError("fluid_input_ml must be >= 0", field="fluid_ml")
    for name, (mean, lo, hi) in rec.vital_aggregates.items():
        present = [v for v in (lo, mean, hi) if v is not None]
        if any(a > b for a, b in zip(present, present[1:])):
            raise ValidationError(
                f"{name}: expected min <= mean <= max, got min={lo} mean={mean} max={hi}",
                field=f"{name}_min",
            )


@dataclass(frozen=True)
class CohortSpec:
    n_patients: int
    seed: int = 0
    mortality_rate: float = 0.2
    signal_strength: float = 1.0
    missing_rate: float = 0.1

    def validate(self) -> None:
        if int(self.n_patients) != self.n_patients or self.n_patients < 2:
            raise ValidationError("n_patients must be an integer >= 2", field="n_patients")
        if not (0.0 < self.mortality_rate < 1.0):
            raise ValidationError("mortality_rate must lie in (0, 1)", field="mortality_rate")
        if not (self.signal_strength >= 0.0):
            raise ValidationError("signal_strength must be >= 0", field="signal_strength")
        if not (0.0 <= self.missing_rate < 1.0):
            raise ValidationError("missing_rate must lie in [0, 1)", field="missing_rate")


# (baseline mean, sd, direction of deterioration, lower clip)
_VITAL_PROFILE = {
    "hr": (85.0, 15.0, 1.0, 30.0),
    "bp": (80.0, 12.0, -1.0, 30.0),
    "glucose": (130.0, 35.0, 1.0, 40.0),
    "creatinine": (1.2, 0.5, 1.0, 0.2),
    "lactate": (1.8, 0.8, 1.0, 0.3),
}


@dataclass(frozen=True)
class _Phenotype:
    name: str
    prevalence: float
    risk: float  # log-odds tilt of prevalence among deaths, per unit signal
    codes: tuple[str, ...]
    vital_offsets: dict  # in standard deviations
    ventilation: float = 0.0
    dialysis: float = 0.0
    elective: bool = False


# Latent admission phenotypes. Each one brings characteristic diagnoses and a vital
# profile; with signal > 0 the high-risk ones are over-represented among deaths.
PHENOTYPES = (
    _Phenotype("sepsis", 0.18, 1.0, ("038.9", "995.92", "785.52", "584.9", "486", "276.2"),
               {"hr": 0.8, "bp": -0.8, "lactate": 1.0, "creatinine": 0.4}, ventilation=0.5),
    _Phenotype("respiratory", 0.18, 0.6, ("518.81", "486", "496", "799.1", "491.21", "427.31"),
               {"hr": 0.4, "lactate": 0.3}, ventilation=1.5),
    _Phenotype("cardiac", 0.2, 0.3, ("428.0", "427.31", "414.01", "427.5", "401.9", "410.71"),
               {"hr": 0.3, "bp": -0.5, "lactate": 0.2}),
    _Phenotype("renal", 0.14, 0.3, ("585.9", "584.9", "276.1", "250.00", "403.91", "285.21"),
               {"creatinine": 1.5, "glucose": 0.3}, dialysis=2.0),
    _Phenotype("neuro", 0.12, 0.0, ("348.1", "431", "434.91", "780.39", "348.5", "345.90"),
               {"bp": 0.5, "glucose": 0.2}),
    _Phenotype("elective_surgical", 0.18, -1.2, ("V58.61", "530.81", "272.4", "244.9", "V45.81", "997.1"),
               {"hr": -0.3, "lactate": -0.3}, elective=True),
)

# ICD-9 style codes marking acute deterioration in any phenotype.
_RISK_CODES = ("570", "286.6", "996.62", "799.02", "518.5")


def _code_pool() -> tuple[str, ...]:
    filler = tuple(f"{700 + i // 10}.{i % 10}" for i in range(120))
    pool: list[str] = []
    for c in _RISK_CODES + tuple(c for ph in PHENOTYPES for c in ph.codes) + filler:
        if c not in pool:
            pool.append(c)
    return tuple(pool)


CODE_POOL = _code_pool()
_BACKGROUND_CODES = tuple(f"{700 + i // 10}.{i % 10}" for i in range(120))


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _phenotype_probs(signal: float, died: bool) -> np.ndarray:
    logits = np.log([ph.prevalence for ph in PHENOTYPES])
    if died:
        logits = logits + signal * np.array([ph.risk for ph in PHENOTYPES])
    p = np.exp(logits - logits.max())
    return p / p.sum()


def generate_cohort(spec: CohortSpec) -> list[PatientRecord]:
    """Draw a synthetic ICU cohort.

    Deaths are assigned to exactly ``round(mortality_rate * n)`` patients. Every
    patient gets a latent phenotype that shapes their diagnoses, vitals and
    interventions. With ``signal_strength > 0`` the dead are drawn from a
    deterioration profile: high-risk phenotypes become more common, vital means
    shift by ``signal_strength`` standard deviations, and risk diagnoses,
    interventions and vasopressor use become more likely. With zero signal every
    feature is drawn independently of the label.
    """
    spec.validate()
    n = int(spec.n_patients)
    rng = np.random.default_rng(spec.seed)
    s = float(spec.signal_strength)

    n_dead = min(max(int(round(spec.mortality_rate * n)), 0), n)
    died = np.zeros(n, dtype=bool)
    died[rng.permutation(n)[:n_dead]] = True
    shift = died.astype(float) * s

    probs = {d: _phenotype_probs(s, d) for d in (False, True)}
    pheno = np.array([rng.choice(len(PHENOTYPES), p=probs[bool(d)]) for d in died])
    elective = np.array([PHENOTYPES[k].elective for k in pheno])

    age = np.clip(rng.normal(65.0, 15.0, n) + 4.0 * shift, 18.0, 95.0)
    gender = rng.choice(GENDERS, n)
    ethnicity = rng.choice(ETHNICITIES, n, p=[0.6, 0.15, 0.1, 0.05, 0.1])
    admission = np.where(elective, "ELECTIVE", rng.choice(ADMISSION_TYPES[:2], n, p=[0.7, 0.3]))
    charlson = rng.poisson(2.0 + 0.8 * shift)

    vitals = {}
    for name in VITALS:
        base, sd, direction, floor = _VITAL_PROFILE[name]
        offset = np.array([PHENOTYPES[k].vital_offsets.get(name, 0.0) for k in pheno])
        mean = np.maximum(rng.normal(base + (offset + direction * shift) * sd, sd), floor)
        lo = np.maximum(mean - np.abs(rng.normal(0.0, 0.6 * sd, n)), floor * 0.5)
        hi = mean + np.abs(rng.normal(0.0, 0.6 * sd, n))
        missing = rng.random(n) < spec.missing_rate
        vitals[name] = (np.round(mean, 3), np.round(lo, 3), np.round(hi, 3), missing)

    fluid = np.round(rng.lognormal(7.6 + 0.15 * shift, 0.5), 1)
    fluid_missing = rng.random(n) < spec.missing_rate

    vent_bias = np.array([PHENOTYPES[k].ventilation for k in pheno])
    dial_bias = np.array([PHENOTYPES[k].dialysis for k in pheno])
    vent = rng.random(n) < _sigmoid(-1.5 + vent_bias + 1.2 * shift)
    dial = rng.random(n) < _sigmoid(-3.0 + dial_bias + 1.0 * shift)
    med_logit = {
        "vasopressors": (-1.8, 1.2),
        "sedatives": (-0.5, 0.5),
        "antibiotics": (0.3, 0.4),
        "anticoagulants": (-0.8, 0.0),
        "insulin": (-1.0, 0.3),
        "diuretics": (-0.9, 0.2),
    }
    meds = {m: rng.random(n) < _sigmoid(a + b * shift) for m, (a, b) in med_logit.items()}

    # Zipf-like popularity over background codes
    weights = 1.0 / np.arange(1, len(_BACKGROUND_CODES) + 1) ** 0.6
    weights /= weights.sum()
    n_codes = rng.poisson(5.0, n)
    risk_prob = _sigmoid(-3.0 + 0.8 * shift)

    extra = rng.poisson(1.0 + 0.8 * shift)
    los = np.maximum(np.round(rng.lognormal(1.2 + 0.3 * shift, 0.6), 2), 0.05)

    records = []
    width = len(str(n))
    for i in range(n):
        picks = rng.choice(len(_BACKGROUND_CODES), size=n_codes[i], replace=False, p=weights)
        codes = {_BACKGROUND_CODES[j] for j in picks}
        ph = PHENOTYPES[pheno[i]]
        codes.update(c for c, hit in zip(ph.codes, rng.random(len(ph.codes)) < 0.6) if hit)
        codes.update(c for c, hit in zip(_RISK_CODES, rng.random(len(_RISK_CODES)) < risk_prob[i]) if hit)
        vit = {}
        for name in VITALS:
            mean, lo, hi, missing = vitals[name]
            vit[name] = (None, None, None) if missing[i] else (float(mean[i]), float(lo[i]), float(hi[i]))
        records.append(
            PatientRecord(
                id=f"P{i:0{width}d}",
                age_years=float(np.round(age[i], 1)),
                gender=str(gender[i]),
                ethnicity=str(ethnicity[i]),
                admission_type=str(admission[i]),
                diagnosis_codes=frozenset(codes),
                charlson_index=int(charlson[i]),
                vital_aggregates=vit,
                intervention_flags={"ventilation": bool(vent[i]), "dialysis": bool(dial[i])},
                fluid_input_ml=None if fluid_missing[i] else float(fluid[i]),
                medication_flags={m: bool(meds[m][i]) for m in MEDICATIONS},
                los_days=float(los[i]),
                died_in_icu=bool(died[i]),
                num_interventions=int(vent[i]) + int(dial[i]) + int(extra[i]),
            )
        )
    return records


# ---------------------------------------------------------------------------
# CSV

BASE_COLUMNS = (
    ["id", "age", "gender", "ethnicity", "admission_type", "diagnoses", "charlson"]
    + [f"{v}_{s}" for v in VITALS for s in STATS]
    + ["ventilation", "dialysis", "fluid_ml"]
)
TAIL_COLUMNS = ["los_days", "num_interventions", "died"]


def csv_columns(med_categories: Iterable[str] = MEDICATIONS) -> list[str]:
    return BASE_COLUMNS + [f"med_{m}" for m in med_categories] + TAIL_COLUMNS


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return "1" if x else "0"
    return repr(x) if isinstance(x, float) else str(x)


def save_cohort(records: Sequence[PatientRecord], path) -> None:
    Path(path).write_text(cohort_to_csv(records), encoding="utf-8")


def cohort_to_csv(records: Sequence[PatientRecord]) -> str:
    meds: list[str] = []
    for r in records:
        for m in r.medication_flags:
            if m not in meds:
                meds.append(m)
    cols = csv_columns(meds)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in records:
        row = [r.id, _fmt(r.age_years), r.gender, r.ethnicity, r.admission_type,
               ";".join(sorted(r.diagnosis_codes)), _fmt(r.charlson_index)]
        for v in VITALS:
            row.extend(_fmt(x) for x in r.vital_aggregates.get(v, (None, None, None)))
        row += [_fmt(r.intervention_flags.get("ventilation", False)),
                _fmt(r.intervention_flags.get("dialysis", False)),
                _fmt(r.fluid_input_ml)]
        row += [_fmt(r.medication_flags.get(m, False)) for m in meds]
        row += [_fmt(r.los_days), _fmt(r.num_interventions), _fmt(r.died_in_icu)]
        w.writerow(row)
    return buf.getvalue()


_TRUE = {"1", "true", "True", "TRUE", "yes"}
_FALSE = {"0", "false", "False", "FALSE", "no"}


def load_cohort(path) -> list[PatientRecord]:
    """Read a cohort CSV. Empty cells in vital and fluid columns become missing values."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty file; expected header {csv_columns()}") from None
        header = [h.strip() for h in header]
        expected = set(BASE_COLUMNS) | set(TAIL_COLUMNS)
        unknown = [h for h in header if h not in expected and not h.startswith("med_")]
        absent = [c for c in BASE_COLUMNS + TAIL_COLUMNS if c not in header]
        if unknown or absent:
            problem = f"unknown columns {unknown}" if unknown else f"missing columns {absent}"
            raise ValidationError(
                f"{path}: {problem}; expected schema: {', '.join(csv_columns(['<category>']))}"
            )
        meds = [h[4:] for h in header if h.startswith("med_")]
        records = []
        seen = set()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValidationError(
                    f"row {lineno}: expected {len(header)} cells, got {len(row)}", row=lineno
                )
            rec = _parse_row(dict(zip(header, row)), meds, lineno)
            if rec.id in seen:
                raise ValidationError(f"row {lineno}, column id: duplicate id {rec.id!r}",
                                      field="id", row=lineno)
            seen.add(rec.id)
            records.append(rec)
    return records


def _parse_row(cells: dict[str, str], meds: list[str], lineno: int) -> PatientRecord:
    def fail(col, msg):
        raise ValidationError(f"row {lineno}, column {col}: {msg}", field=col, row=lineno)

    def num(col, optional=False, kind=float):
        raw = cells[col].strip()
        if raw == "":
            if optional:
                return None
            fail(col, "value required")
        try:
            val = kind(raw)
        except ValueError:
            fail(col, f"cannot parse {raw!r} as {kind.__name__}")
        if kind is float and not math.isfinite(val):
            fail(col, f"non-finite value {raw!r}")
        return val

    def flag(col):
        raw = cells[col].strip()
        if raw in _TRUE:
            return True
        if raw in _FALSE or raw == "":
            return False
        fail(col, f"expected 0/1, got {raw!r}")

    def text(col):
        raw = cells[col].strip()
        if raw == "":
            fail(col, "value required")
        return raw

    vit = {v: tuple(num(f"{v}_{s}", optional=True) for s in STATS) for v in VITALS}
    diag = cells["diagnoses"].strip()
    try:
        return PatientRecord(
            id=text("id"),
            age_years=num("age"),
            gender=text("gender"),
            ethnicity=text("ethnicity"),
            admission_type=text("admission_type"),
            diagnosis_codes=frozenset(c.strip() for c in diag.split(";") if c.strip()) if diag else frozenset(),
            charlson_index=num("charlson", kind=int),
            vital_aggregates=vit,
            intervention_flags={"ventilation": flag("ventilation"), "dialysis": flag("dialysis")},
            fluid_input_ml=num("fluid_ml", optional=True),
            medication_flags={m: flag(f"med_{m}") for m in meds},
            los_days=num("los_days"),
            died_in_icu=flag("died"),
            num_interventions=num("num_interventions", kind=int),
        )
    except ValidationError as err:
        if err.row is not None:
            raise
        fail(err.field or "?", str(err))


# ---------------------------------------------------------------------------
# Severity proxy

SEVERITY_WEIGHTS = (0.4, 0.3, 0.3)


@dataclass(frozen=True)
class SeverityBounds:
    interventions_min: float
    interventions_max: float
    los_min: float
    los_max: float

    @classmethod
    def fit(cls, records: Sequence[PatientRecord]) -> "SeverityBounds":
        if not records:
            raise ValidationError("cannot fit severity bounds on an empty cohort")
        iv = [r.num_interventions for r in records]
        los = [r.los_days for r in records]
        return cls(float(min(iv)), float(max(iv)), float(min(los)), float(max(los)))


def _minmax(x: float, lo: float, hi: float) -> float:
    if hi <= lo:
        return 0.0
    return min(max((x - lo) / (hi - lo), 0.0), 1.0)


def severity_proxy(record: PatientRecord, bounds: SeverityBounds) -> float:
    """Criticalness target in [0, 1]: weighted interventions, length of stay and death."""
    w_iv, w_los, w_died = SEVERITY_WEIGHTS
    score = (
        w_iv * _minmax(record.num_interventions, bounds.interventions_min, bounds.interventions_max)
        + w_los * _minmax(record.los_days, bounds.los_min, bounds.los_max)
        + w_died * float(record.died_in_icu)
    )
    return min(max(score, 0.0), 1.0)


def severity_targets(records: Sequence[PatientRecord], bounds: SeverityBounds) -> np.ndarray:
    return np.array([severity_proxy(r, bounds) for r in records], dtype=float)


def labels(records: Sequence[PatientRecord]) -> np.ndarray:
    return np.array([r.died_in_icu for r in records], dtype=bool)
