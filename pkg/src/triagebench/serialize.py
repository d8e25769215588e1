"""Render triage records as prompt text.

Four styles are supported: a natural-language paragraph, and three
name-list/value-list layouts delimited by commas, spaces, or line breaks.
The natural paragraph omits absent fields; the list styles keep a
placeholder token so name/value alignment survives missing data. An
optional demographic sentence is prepended on its own line so
counterfactual tooling can strip it byte-exactly.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

from .dataset import VITAL_FIELDS, Protocol, TriageRecord

DEFAULT_DEMOGRAPHIC_TEMPLATE = "The patient is a {race} {sex}."
DEFAULT_MISSING_TOKEN = "NA"


class TemplateMissingPlaceholderError(ValueError):
    pass


class SerializationStyle(str, Enum):
    NATURAL = "natural"
    COMMAS = "commas"
    NEWLINES = "newlines"
    SPACES = "spaces"


_LIST_DELIMITERS = {
    SerializationStyle.COMMAS: ", ",
    SerializationStyle.SPACES: " ",
    SerializationStyle.NEWLINES: "\n",
}


@dataclass(frozen=True)
class SerializationOptions:
    style: SerializationStyle = SerializationStyle.NATURAL
    include_demographics: bool = False
    demographic_template: str = DEFAULT_DEMOGRAPHIC_TEMPLATE
    missing_token: str = DEFAULT_MISSING_TOKEN

    def __post_init__(self):
        if self.include_demographics:
            for placeholder in ("{race}", "{sex}"):
                if placeholder not in self.demographic_template:
                    raise TemplateMissingPlaceholderError(
                        f"demographic template must contain {placeholder}"
                    )


def field_order(protocol: Protocol, extras_keys: Sequence[str] = ()) -> tuple[str, ...]:
    """Canonical field ordering shared by every style and record.

    Chief complaint first, the six vitals in schema order, pain, then any
    ``x_``-prefixed extras in schema order (KTAS carries extras; ESI
    normally has none). The protocol argument documents intent; extras are
    appended whenever present.
    """
    del protocol
    return ("chief_complaint", *VITAL_FIELDS, "pain", *extras_keys)


def record_field_order(record: TriageRecord) -> tuple[str, ...]:
    return field_order(Protocol.ESI, tuple(key for key, _ in record.extras))


def _field_value(record: TriageRecord, name: str) -> Optional[str]:
    """Formatted value for a field, or None when the field is absent."""
    if name == "chief_complaint":
        return record.chief_complaint.strip()
    if name == "pain":
        return None if record.pain is None else str(record.pain)
    if name == "temperature":
        value = record.vitals.temperature
        return None if value is None else f"{value:.1f}"
    if name in VITAL_FIELDS:
        value = record.vitals.get(name)
        return None if value is None else format(value, "g")
    extras = dict(record.extras)
    if name in extras:
        return extras[name] if extras[name].strip() else None
    raise KeyError(name)


_NATURAL_SENTENCES = {
    "temperature": "Temperature is {} °C.",
    "heart_rate": "Heart rate is {} beats per minute.",
    "respiratory_rate": "Respiratory rate is {} breaths per minute.",
    "systolic_bp": "Systolic blood pressure is {} mmHg.",
    "diastolic_bp": "Diastolic blood pressure is {} mmHg.",
    "spo2": "Oxygen saturation is {}%.",
    "pain": "Pain level is {} out of 10.",
}


def _natural_sentence(name: str, value: str) -> str:
    if name == "chief_complaint":
        return f"Chief complaint: {value}."
    if name in _NATURAL_SENTENCES:
        return _NATURAL_SENTENCES[name].format(value)
    # Extras: "x_arrival_mode" -> "Arrival mode: walk-in."
    label = name.removeprefix("x_").replace("_", " ").capitalize()
    return f"{label}: {value}."


def demographic_sentence(record: TriageRecord, opts: SerializationOptions) -> Optional[str]:
    """The prepended demographic sentence, or None when not applicable."""
    if not opts.include_demographics:
        return None
    sex, race = record.demographics.sex, record.demographics.race
    if sex is None or race is None:
        return None
    return opts.demographic_template.format(race=race.label, sex=sex.value)


def serialize_record(record: TriageRecord, opts: SerializationOptions) -> str:
    """Deterministic prompt text for one record under the chosen style."""
    order = record_field_order(record)
    values = {name: _field_value(record, name) for name in order}

    if opts.style is SerializationStyle.NATURAL:
        sentences = [
            _natural_sentence(name, values[name]) for name in order if values[name] is not None
        ]
        body = " ".join(sentences)
    else:
        delimiter = _LIST_DELIMITERS[opts.style]
        names_block = delimiter.join(order)
        values_block = delimiter.join(
            values[name] if values[name] is not None else opts.missing_token for name in order
        )
        separator = "\n\n" if opts.style is SerializationStyle.NEWLINES else "\n"
        body = names_block + separator + values_block

    sentence = demographic_sentence(record, opts)
    if sentence is None:
        return body
    return sentence + "\n" + body


def strip_demographic_sentence(text: str) -> str:
    """Drop the first line; inverse of the demographic-sentence prepend."""
    _, _, rest = text.partition("\n")
    return rest
