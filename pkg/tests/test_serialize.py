from __future__ import annotations

import random
from pathlib import Path

import pytest

from conftest import GOLDEN_CASES, make_record
from triagebench.dataset import Demographics, Protocol, Race, Sex, VitalSigns, generate_synthetic_dataset
from triagebench.serialize import (
    SerializationOptions,
    SerializationStyle,
    TemplateMissingPlaceholderError,
    demographic_sentence,
    field_order,
    serialize_record,
    strip_demographic_sentence,
)

GOLDEN_DIR = Path(__file__).parent / "golden"

LIST_STYLES = (SerializationStyle.COMMAS, SerializationStyle.NEWLINES, SerializationStyle.SPACES)


@pytest.mark.parametrize("name,record,opts", GOLDEN_CASES, ids=[c[0] for c in GOLDEN_CASES])
def test_golden_corpus(name, record, opts):
    expected = (GOLDEN_DIR / f"{name}.txt").read_text("utf-8")
    assert serialize_record(record, opts) == expected


def test_commas_name_value_layout():
    record = make_record("r2", "headache", vitals=VitalSigns(heart_rate=80.0), pain=None)
    text = serialize_record(record, SerializationOptions(style=SerializationStyle.COMMAS))
    names, values = text.split("\n")
    assert names.split(", ")[0] == "chief_complaint"
    assert names.split(", ").index("heart_rate") == values.split(", ").index("80")
    assert values.split(", ")[0] == "headache"


def test_natural_contains_values_and_no_missing_token():
    record = make_record("r2", "headache", vitals=VitalSigns(heart_rate=80.0), pain=None)
    text = serialize_record(record, SerializationOptions(style=SerializationStyle.NATURAL))
    assert "headache" in text
    assert "80" in text
    assert "NA" not in text


def test_demographic_sentence_prefix():
    record = make_record(demographics=Demographics(sex=Sex.FEMALE, race=Race.BLACK))
    opts = SerializationOptions(style=SerializationStyle.NATURAL, include_demographics=True)
    assert serialize_record(record, opts).startswith("The patient is a Black Female.")


def test_demographic_sentence_display_labels():
    record = make_record(
        demographics=Demographics(sex=Sex.MALE, race=Race.NATIVE_HAWAIIAN_PACIFIC_ISLANDER)
    )
    opts = SerializationOptions(include_demographics=True)
    assert (
        demographic_sentence(record, opts)
        == "The patient is a Native Hawaiian/Pacific Islander Male."
    )


def test_template_missing_placeholder_rejected():
    with pytest.raises(TemplateMissingPlaceholderError):
        SerializationOptions(include_demographics=True, demographic_template="A {race} patient.")


def test_serialization_deterministic():
    record = make_record()
    for style in SerializationStyle:
        opts = SerializationOptions(style=style)
        assert serialize_record(record, opts) == serialize_record(record, opts)


def _random_record(rng: random.Random, i: int):
    def maybe(v):
        return v if rng.random() > 0.4 else None

    return make_record(
        f"p{i}",
        rng.choice(["headache", "chest pain", "dizziness for 3 hours"]),
        vitals=VitalSigns(
            temperature=maybe(round(rng.uniform(35, 40), 1)),
            heart_rate=maybe(float(rng.randint(50, 140))),
            respiratory_rate=maybe(float(rng.randint(10, 30))),
            systolic_bp=maybe(float(rng.randint(80, 180))),
            diastolic_bp=maybe(float(rng.randint(50, 110))),
            spo2=maybe(float(rng.randint(80, 100))),
        ),
        pain=maybe(rng.randint(0, 10)),
        label=None,
    )


def test_missing_token_count_matches_absent_fields():
    rng = random.Random(7)
    for i in range(50):
        record = _random_record(rng, i)
        absent = sum(
            1
            for name in ("temperature", "heart_rate", "respiratory_rate",
                         "systolic_bp", "diastolic_bp", "spo2")
            if record.vitals.get(name) is None
        ) + (1 if record.pain is None else 0)
        for style in LIST_STYLES:
            text = serialize_record(record, SerializationOptions(style=style))
            delimiter = {"commas": ", ", "spaces": " ", "newlines": "\n"}[style.value]
            tokens = text.split(delimiter)
            assert tokens.count("NA") == absent


def test_present_values_appear_in_output():
    rng = random.Random(8)
    for i in range(30):
        record = _random_record(rng, i)
        for style in SerializationStyle:
            text = serialize_record(record, SerializationOptions(style=style))
            assert record.chief_complaint in text
            if record.pain is not None:
                assert str(record.pain) in text


def test_variants_differ_only_in_demographic_sentence():
    record = make_record()
    opts = SerializationOptions(style=SerializationStyle.NATURAL, include_demographics=True)
    texts = [
        serialize_record(record.with_demographics(sex, race), opts)
        for sex in Sex
        for race in Race
    ]
    stripped = {strip_demographic_sentence(t) for t in texts}
    assert len(stripped) == 1
    assert len(set(texts)) == 12


def test_demographics_skipped_when_fields_missing():
    record = make_record(demographics=Demographics(sex=None, race=Race.ASIAN))
    opts = SerializationOptions(include_demographics=True)
    assert "patient is" not in serialize_record(record, opts)


class TestFieldOrder:
    def test_esi_starts_with_chief_complaint(self):
        order = field_order(Protocol.ESI)
        assert order[0] == "chief_complaint"
        assert order[-1] == "pain"

    def test_ktas_appends_extras_in_schema_order(self):
        extras = ("x_arrival_mode", "x_mental_status")
        order = field_order(Protocol.KTAS, extras)
        assert order == field_order(Protocol.ESI) + extras

    def test_deterministic(self):
        assert field_order(Protocol.ESI) == field_order(Protocol.ESI)


def test_ktas_record_serializes_extras(tmp_path):
    ds = generate_synthetic_dataset(3, seed=1, protocol=Protocol.KTAS)
    text = serialize_record(ds.records[0], SerializationOptions(style=SerializationStyle.COMMAS))
    assert "x_arrival_mode" in text
