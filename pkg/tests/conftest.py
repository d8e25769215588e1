from __future__ import annotations

import pytest

from triagebench.dataset import (
    Dataset,
    Demographics,
    Protocol,
    Race,
    Sex,
    TriageRecord,
    VitalSigns,
    generate_synthetic_dataset,
)
from triagebench.serialize import SerializationOptions, SerializationStyle


def make_record(
    record_id: str = "r1",
    chief_complaint: str = "chest pain radiating to the left arm",
    **kwargs,
) -> TriageRecord:
    defaults = dict(
        cohort_year=2015,
        vitals=VitalSigns(
            temperature=37.0,
            heart_rate=80.0,
            respiratory_rate=16.0,
            systolic_bp=120.0,
            diastolic_bp=80.0,
            spo2=98.0,
        ),
        pain=2,
        label=5,
        demographics=Demographics(sex=Sex.FEMALE, race=Race.BLACK),
    )
    defaults.update(kwargs)
    return TriageRecord(id=record_id, chief_complaint=chief_complaint, **defaults)


@pytest.fixture(scope="session")
def synthetic_1k() -> Dataset:
    return generate_synthetic_dataset(1000, seed=11, protocol=Protocol.ESI, missingness=0.15)


@pytest.fixture(scope="session")
def synthetic_small() -> Dataset:
    return generate_synthetic_dataset(120, seed=3, protocol=Protocol.ESI, missingness=0.1)


# The golden serialization corpus: (name, record, options) triples matched
# against checked-in expected text, bit for bit.
GOLDEN_CASES = [
    (
        "natural_full",
        make_record(),
        SerializationOptions(style=SerializationStyle.NATURAL),
    ),
    (
        "natural_sparse",
        make_record(
            "r2",
            "headache",
            vitals=VitalSigns(heart_rate=80.0),
            pain=None,
            label=None,
        ),
        SerializationOptions(style=SerializationStyle.NATURAL),
    ),
    (
        "natural_demographics",
        make_record(),
        SerializationOptions(style=SerializationStyle.NATURAL, include_demographics=True),
    ),
    (
        "commas_sparse",
        make_record(
            "r2",
            "headache",
            vitals=VitalSigns(heart_rate=80.0),
            pain=None,
            label=None,
        ),
        SerializationOptions(style=SerializationStyle.COMMAS),
    ),
    (
        "newlines_full",
        make_record(),
        SerializationOptions(style=SerializationStyle.NEWLINES),
    ),
    (
        "spaces_full",
        make_record(),
        SerializationOptions(style=SerializationStyle.SPACES),
    ),
    (
        "commas_ktas_extras",
        make_record(
            "k1",
            "fever and chills",
            extras=(("x_arrival_mode", "ambulance"), ("x_mental_status", "alert")),
        ),
        SerializationOptions(style=SerializationStyle.COMMAS, include_demographics=True),
    ),
]
