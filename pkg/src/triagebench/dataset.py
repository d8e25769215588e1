"""Triage data model: records, validation, canonical files, splits, synthesis.

The canonical dataset file is UTF-8 delimiter-separated text with a header
row and the columns id, cohort_year, temperature, heart_rate,
respiratory_rate, systolic_bp, diastolic_bp, spo2, pain, chief_complaint,
acuity, sex, race, plus protocol-specific extras columns prefixed ``x_``.
Empty cells mean "missing", never zero.
"""
from __future__ import annotations

import csv
import random
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from .util import largest_remainder, sub_seed

ACUITY_MIN = 1
ACUITY_MAX = 5

# Schema order of the six vital-sign columns; pain is the seventh
# missingness slot.
VITAL_FIELDS = (
    "temperature",
    "heart_rate",
    "respiratory_rate",
    "systolic_bp",
    "diastolic_bp",
    "spo2",
)

# Plausibility windows applied at ingest; values outside are rejected.
DEFAULT_VITAL_RANGES: dict[str, tuple[float, float]] = {
    "temperature": (25.0, 45.0),
    "heart_rate": (0.0, 300.0),
    "respiratory_rate": (0.0, 80.0),
    "systolic_bp": (0.0, 300.0),
    "diastolic_bp": (0.0, 200.0),
    "spo2": (0.0, 100.0),
}

CANONICAL_COLUMNS = (
    "id",
    "cohort_year",
    *VITAL_FIELDS,
    "pain",
    "chief_complaint",
    "acuity",
    "sex",
    "race",
)

# Boundaries of the missingness strata used by the temporal split:
# 0, (0, .25], (.25, .5], (.5, 1].
DEFAULT_MISSINGNESS_EDGES = (0.25, 0.5)


class DatasetError(Exception):
    """Base class for dataset loading and splitting failures."""


class FileUnreadableError(DatasetError):
    pass


class MissingRequiredColumnError(DatasetError):
    pass


class InsufficientRecordsError(DatasetError):
    pass


class Protocol(str, Enum):
    ESI = "ESI"
    KTAS = "KTAS"


class Sex(str, Enum):
    MALE = "Male"
    FEMALE = "Female"


class Race(str, Enum):
    """Race categories, in the canonical order used throughout the audit."""

    WHITE = "White"
    BLACK = "Black"
    ASIAN = "Asian"
    HISPANIC = "Hispanic"
    AMERICAN_INDIAN = "AmericanIndian"
    NATIVE_HAWAIIAN_PACIFIC_ISLANDER = "NativeHawaiianPacificIslander"

    @property
    def label(self) -> str:
        return _RACE_LABELS[self]


_RACE_LABELS = {
    Race.WHITE: "White",
    Race.BLACK: "Black",
    Race.ASIAN: "Asian",
    Race.HISPANIC: "Hispanic",
    Race.AMERICAN_INDIAN: "American Indian",
    Race.NATIVE_HAWAIIAN_PACIFIC_ISLANDER: "Native Hawaiian/Pacific Islander",
}


def validate_acuity(value: int) -> int:
    level = int(value)
    if level != value or not ACUITY_MIN <= level <= ACUITY_MAX:
        raise ValueError(f"acuity must be an integer in [1, 5], got {value!r}")
    return level


@dataclass(frozen=True)
class VitalSigns:
    temperature: Optional[float] = None
    heart_rate: Optional[float] = None
    respiratory_rate: Optional[float] = None
    systolic_bp: Optional[float] = None
    diastolic_bp: Optional[float] = None
    spo2: Optional[float] = None

    def get(self, name: str) -> Optional[float]:
        return getattr(self, name)


@dataclass(frozen=True)
class Demographics:
    sex: Optional[Sex] = None
    race: Optional[Race] = None


@dataclass(frozen=True)
class TriageRecord:
    id: str
    chief_complaint: str
    cohort_year: Optional[int] = None
    vitals: VitalSigns = field(default_factory=VitalSigns)
    pain: Optional[int] = None
    extras: tuple[tuple[str, str], ...] = ()
    label: Optional[int] = None
    demographics: Demographics = field(default_factory=Demographics)

    def __post_init__(self):
        if not self.chief_complaint.strip():
            raise ValueError(f"record {self.id!r}: chief_complaint is empty")
        if self.pain is not None and not 0 <= self.pain <= 10:
            raise ValueError(f"record {self.id!r}: pain {self.pain} outside [0, 10]")
        if self.label is not None:
            validate_acuity(self.label)

    def with_demographics(self, sex: Optional[Sex], race: Optional[Race]) -> "TriageRecord":
        return replace(self, demographics=Demographics(sex=sex, race=race))


@dataclass(frozen=True)
class Dataset:
    name: str
    protocol: Protocol
    records: tuple[TriageRecord, ...]

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(ids) != len(set(ids)):
            seen, dup = set(), None
            for i in ids:
                if i in seen:
                    dup = i
                    break
                seen.add(i)
            raise ValueError(f"duplicate record id {dup!r} in dataset {self.name!r}")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def by_id(self, record_id: str) -> TriageRecord:
        for r in self.records:
            if r.id == record_id:
                return r
        raise KeyError(record_id)

    def labeled(self) -> tuple[TriageRecord, ...]:
        return tuple(r for r in self.records if r.label is not None)


@dataclass(frozen=True)
class SplitSpec:
    train_year_range: tuple[int, int]
    test_year_range: tuple[int, int]
    train_n: int
    test_n: int
    seed: int

    def __post_init__(self):
        lo_t, hi_t = self.train_year_range
        lo_e, hi_e = self.test_year_range
        if lo_t > hi_t or lo_e > hi_e:
            raise ValueError("year ranges must be (low, high) inclusive intervals")
        if not (hi_t < lo_e or hi_e < lo_t):
            raise ValueError("train and test year ranges must be disjoint")


@dataclass(frozen=True)
class RowRejection:
    row_number: int
    reason: str
    detail: str


@dataclass(frozen=True)
class LoadResult:
    dataset: Dataset
    rejections: tuple[RowRejection, ...]


def missingness_fraction(record: TriageRecord) -> float:
    """Fraction of the six vitals plus pain (7 slots) that are absent."""
    absent = sum(1 for name in VITAL_FIELDS if record.vitals.get(name) is None)
    if record.pain is None:
        absent += 1
    return absent / 7.0


def missingness_bucket(fraction: float, edges: Sequence[float] = DEFAULT_MISSINGNESS_EDGES) -> int:
    """Bucket index for a missingness fraction: 0 exact, then (0, e1], (e1, e2], (e2, 1]."""
    if fraction == 0.0:
        return 0
    for i, edge in enumerate(edges):
        if fraction <= edge:
            return i + 1
    return len(edges) + 1


def _parse_optional_float(cell: str, column: str, ranges: Mapping[str, tuple[float, float]]):
    if cell.strip() == "":
        return None
    value = float(cell)
    lo, hi = ranges[column]
    if not lo <= value <= hi:
        raise ValueError(f"{column}={value} outside plausibility window [{lo}, {hi}]")
    return value


def load_dataset(
    path: str | Path,
    protocol: Protocol,
    schema_map: Optional[Mapping[str, str]] = None,
    delimiter: str = ",",
    name: Optional[str] = None,
    vital_ranges: Mapping[str, tuple[float, float]] = DEFAULT_VITAL_RANGES,
) -> LoadResult:
    """Read a delimited triage file into a validated Dataset.

    `schema_map` maps foreign header names onto the canonical schema; columns
    already carrying canonical names pass through unchanged. Rows that fail
    validation are collected as RowRejections (1-based data row numbers)
    rather than aborting the load.
    """
    path = Path(path)
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except OSError as exc:
        raise FileUnreadableError(f"cannot read {path}: {exc}") from exc

    schema_map = dict(schema_map or {})
    records: list[TriageRecord] = []
    rejections: list[RowRejection] = []
    seen_ids: set[str] = set()

    with fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise MissingRequiredColumnError(f"{path} is empty, no header row")
        columns = [schema_map.get(col.strip(), col.strip()) for col in header]
        for required in ("id", "chief_complaint"):
            if required not in columns:
                raise MissingRequiredColumnError(f"{path} lacks required column {required!r}")
        extras_columns = [c for c in columns if c.startswith("x_")]

        for row_number, row in enumerate(reader, start=1):
            cells = dict(zip(columns, row))
            try:
                record = _row_to_record(cells, extras_columns, vital_ranges)
            except ValueError as exc:
                rejections.append(RowRejection(row_number, _reason_for(exc), str(exc)))
                continue
            if record.id in seen_ids:
                rejections.append(RowRejection(row_number, "DuplicateId", record.id))
                continue
            seen_ids.add(record.id)
            records.append(record)

    dataset = Dataset(name=name or path.stem, protocol=protocol, records=tuple(records))
    return LoadResult(dataset=dataset, rejections=tuple(rejections))


def _reason_for(exc: ValueError) -> str:
    text = str(exc)
    if "acuity" in text:
        return "InvalidAcuity"
    if "plausibility" in text:
        return "OutOfRangeVital"
    if "chief_complaint" in text:
        return "EmptyChiefComplaint"
    return "InvalidValue"


def _row_to_record(
    cells: Mapping[str, str],
    extras_columns: Sequence[str],
    vital_ranges: Mapping[str, tuple[float, float]],
) -> TriageRecord:
    record_id = cells.get("id", "").strip()
    if not record_id:
        raise ValueError("id is empty")

    vitals = VitalSigns(
        **{
            name: _parse_optional_float(cells.get(name, ""), name, vital_ranges)
            for name in VITAL_FIELDS
        }
    )

    pain_cell = cells.get("pain", "").strip()
    pain = None
    if pain_cell:
        pain = int(float(pain_cell))
        if not 0 <= pain <= 10:
            raise ValueError(f"pain {pain} outside [0, 10]")

    year_cell = cells.get("cohort_year", "").strip()
    cohort_year = int(year_cell) if year_cell else None

    acuity_cell = cells.get("acuity", "").strip()
    label = None
    if acuity_cell:
        try:
            label = validate_acuity(int(float(acuity_cell)))
        except ValueError:
            raise ValueError(f"acuity value {acuity_cell!r} outside [1, 5]")

    sex_cell = cells.get("sex", "").strip()
    race_cell = cells.get("race", "").strip()
    try:
        sex = Sex(sex_cell) if sex_cell else None
        race = Race(race_cell) if race_cell else None
    except ValueError:
        raise ValueError(f"unknown demographic value sex={sex_cell!r} race={race_cell!r}")

    extras = tuple((col, cells.get(col, "")) for col in extras_columns)

    return TriageRecord(
        id=record_id,
        chief_complaint=cells.get("chief_complaint", ""),
        cohort_year=cohort_year,
        vitals=vitals,
        pain=pain,
        extras=extras,
        label=label,
        demographics=Demographics(sex=sex, race=race),
    )


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, "g")
    if isinstance(value, Enum):
        return value.value
    return str(value)


def write_dataset(dataset: Dataset, path: str | Path, delimiter: str = ",") -> None:
    """Write a Dataset as a canonical file; load_dataset round-trips it."""
    extras_columns: list[str] = []
    for record in dataset:
        for key, _ in record.extras:
            if key not in extras_columns:
                extras_columns.append(key)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter=delimiter, quoting=csv.QUOTE_MINIMAL,
                            lineterminator="\n")
        writer.writerow(list(CANONICAL_COLUMNS) + extras_columns)
        for r in dataset:
            extras = dict(r.extras)
            writer.writerow(
                [
                    r.id,
                    _format_cell(r.cohort_year),
                    *[_format_cell(r.vitals.get(name)) for name in VITAL_FIELDS],
                    _format_cell(r.pain),
                    r.chief_complaint,
                    _format_cell(r.label),
                    _format_cell(r.demographics.sex),
                    _format_cell(r.demographics.race),
                ]
                + [extras.get(col, "") for col in extras_columns]
            )


def temporal_stratified_split(
    dataset: Dataset,
    spec: SplitSpec,
    missingness_edges: Sequence[float] = DEFAULT_MISSINGNESS_EDGES,
) -> tuple[Dataset, Dataset]:
    """Draw disjoint train/test sets from temporal cohorts.

    Within each cohort, sampling is stratified over acuity level x
    missingness bucket with per-stratum quotas apportioned by largest
    remainder, so every stratum is represented proportionally to within one
    record. Unlabeled records cannot be stratified and are excluded from
    both splits (they stay available in the source dataset for audits).
    """
    train = _sample_cohort(dataset, spec.train_year_range, spec.train_n,
                           sub_seed(spec.seed, "split:train"), missingness_edges, "train")
    test = _sample_cohort(dataset, spec.test_year_range, spec.test_n,
                          sub_seed(spec.seed, "split:test"), missingness_edges, "test")
    return train, test


def _sample_cohort(
    dataset: Dataset,
    year_range: tuple[int, int],
    n: int,
    seed: int,
    edges: Sequence[float],
    tag: str,
) -> Dataset:
    lo, hi = year_range
    cohort = [
        r
        for r in dataset
        if r.label is not None and r.cohort_year is not None and lo <= r.cohort_year <= hi
    ]
    if len(cohort) < n:
        raise InsufficientRecordsError(
            f"{tag} cohort {lo}-{hi} has {len(cohort)} labeled records, {n} requested"
        )

    strata: dict[tuple[int, int], list[TriageRecord]] = {}
    for r in cohort:
        key = (r.label, missingness_bucket(missingness_fraction(r), edges))
        strata.setdefault(key, []).append(r)

    quotas = largest_remainder({k: len(v) for k, v in strata.items()}, n)

    chosen_ids: set[str] = set()
    for key in sorted(strata):
        members = sorted(strata[key], key=lambda r: r.id)
        rng = random.Random(sub_seed(seed, f"{key[0]}:{key[1]}"))
        chosen_ids.update(r.id for r in rng.sample(members, quotas[key]))

    records = tuple(r for r in dataset if r.id in chosen_ids)
    return Dataset(name=f"{dataset.name}-{tag}", protocol=dataset.protocol, records=records)


_COMPLAINT_TEMPLATES = (
    "chest pain radiating to the left arm",
    "shortness of breath on exertion",
    "abdominal pain with nausea",
    "severe headache since this morning",
    "fever and chills",
    "dizziness when standing",
    "laceration on the forearm",
    "lower back pain after lifting",
    "persistent cough",
    "twisted ankle while running",
    "palpitations and anxiety",
    "vomiting and diarrhea",
    "difficulty breathing at rest",
    "generalized weakness",
    "sore throat and ear pain",
)

_KTAS_ARRIVAL_MODES = ("walk-in", "ambulance", "transfer")
_KTAS_MENTAL_STATUS = ("alert", "verbal", "pain", "unresponsive")


def generate_synthetic_dataset(
    n: int,
    seed: int,
    protocol: Protocol = Protocol.ESI,
    missingness: float = 0.15,
    year_range: tuple[int, int] = (2014, 2019),
) -> Dataset:
    """Deterministic synthetic triage records (the shipped data stand-in).

    Labels come from the same vitals-threshold rule the rule-based mock
    model applies at prediction time, so a rule-based mock evaluated on
    synthetic data scores accuracy 1.0 by construction. `missingness` is the
    per-slot probability that a vital or pain value is withheld.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    # Imported here: the gateway module depends on this one for its types.
    from .gateway import rule_based_acuity

    rng = random.Random(seed)
    sexes = list(Sex)
    races = list(Race)
    records = []
    for i in range(n):
        complaint = rng.choice(_COMPLAINT_TEMPLATES)
        duration = rng.randint(1, 48)
        chief = f"{complaint} for {duration} hours"

        temperature = rng.gauss(38.6, 0.7) if rng.random() < 0.10 else rng.gauss(36.9, 0.5)
        heart_rate = rng.gauss(125.0, 20.0) if rng.random() < 0.15 else rng.gauss(82.0, 14.0)
        resp_rate = rng.gauss(28.0, 5.0) if rng.random() < 0.10 else rng.gauss(16.0, 3.0)
        systolic = rng.gauss(86.0, 8.0) if rng.random() < 0.08 else rng.gauss(124.0, 15.0)
        diastolic = rng.gauss(76.0, 10.0)
        spo2 = rng.gauss(89.0, 4.0) if rng.random() < 0.10 else rng.gauss(97.0, 1.5)

        vitals_values = {
            "temperature": round(min(max(temperature, 30.0), 43.0), 1),
            "heart_rate": float(round(min(max(heart_rate, 30.0), 220.0))),
            "respiratory_rate": float(round(min(max(resp_rate, 6.0), 60.0))),
            "systolic_bp": float(round(min(max(systolic, 60.0), 240.0))),
            "diastolic_bp": float(round(min(max(diastolic, 30.0), 160.0))),
            "spo2": float(round(min(max(spo2, 70.0), 100.0))),
        }
        pain: Optional[int] = rng.randint(0, 10)

        # Missingness draws happen for every slot regardless of rate so the
        # record stream is identical across different missingness settings.
        for name in VITAL_FIELDS:
            if rng.random() < missingness:
                vitals_values[name] = None
        if rng.random() < missingness:
            pain = None

        sex = rng.choice(sexes) if rng.random() < 0.9 else None
        race = rng.choice(races) if rng.random() < 0.9 else None

        extras: tuple[tuple[str, str], ...] = ()
        if protocol is Protocol.KTAS:
            extras = (
                ("x_arrival_mode", rng.choice(_KTAS_ARRIVAL_MODES)),
                ("x_mental_status", rng.choice(_KTAS_MENTAL_STATUS)),
            )

        record = TriageRecord(
            id=f"syn-{i:06d}",
            chief_complaint=chief,
            cohort_year=rng.randint(year_range[0], year_range[1]),
            vitals=VitalSigns(**vitals_values),
            pain=pain,
            extras=extras,
            demographics=Demographics(sex=sex, race=race),
        )
        records.append(replace(record, label=rule_based_acuity(record)))

    return Dataset(name=f"synthetic-{protocol.value.lower()}-{seed}", protocol=protocol,
                   records=tuple(records))
