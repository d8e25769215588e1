"""Counterfactual demographic audit: variants, paired runs, group means.

Every record expands into the full 12-way product of two sexes and six
races; the twelve prompts are identical except for the demographic
sentence, so any prediction difference is attributable to the intervened
attributes. Demonstrations are built demographic-neutral (the treatment
variable appears only in the query), and the original record demographics
are overridden, never merged.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import TYPE_CHECKING, Optional, Sequence

from .dataset import Dataset, Race, Sex, TriageRecord
from .prompting import DemoBuilder, PromptBundle, StrategyConfig, build_prompt
from .serialize import SerializationOptions
from .stats import TestResult, friedman, wilcoxon_signed_rank

if TYPE_CHECKING:
    from .gateway import Gateway, ModelEndpoint

SEX_ORDER = (Sex.MALE, Sex.FEMALE)
RACE_ORDER = tuple(Race)
# Canonical audit column order: Male then Female, each crossed with the
# six races in canonical order.
VARIANT_ORDER: tuple[tuple[Sex, Race], ...] = tuple(
    (sex, race) for sex in SEX_ORDER for race in RACE_ORDER
)


class AuditError(Exception):
    pass


class AbortThresholdError(AuditError):
    pass


@dataclass(frozen=True)
class CounterfactualVariant:
    base_id: str
    sex: Sex
    race: Race

    def apply(self, record: TriageRecord) -> TriageRecord:
        if record.id != self.base_id:
            raise ValueError(f"variant of {self.base_id!r} applied to record {record.id!r}")
        return record.with_demographics(self.sex, self.race)


def generate_variants(record: TriageRecord) -> tuple[CounterfactualVariant, ...]:
    """All 12 sex x race variants of a record, in canonical column order."""
    return tuple(
        CounterfactualVariant(base_id=record.id, sex=sex, race=race)
        for sex, race in VARIANT_ORDER
    )


@dataclass(frozen=True)
class AuditMatrix:
    record_ids: tuple[str, ...]
    variant_order: tuple[tuple[Sex, Race], ...]
    predictions: tuple[tuple[Optional[int], ...], ...]

    def __post_init__(self):
        for row in self.predictions:
            if len(row) != len(self.variant_order):
                raise ValueError("prediction row width does not match variant order")
        if len(self.predictions) != len(self.record_ids):
            raise ValueError("prediction row count does not match record ids")

    def column(self, sex: Sex, race: Race) -> tuple[Optional[int], ...]:
        j = self.variant_order.index((sex, race))
        return tuple(row[j] for row in self.predictions)

    def complete_rows(self) -> tuple[tuple[int, ...], ...]:
        """Rows with no missing cell; paired tests drop the rest listwise."""
        return tuple(
            tuple(row) for row in self.predictions if all(v is not None for v in row)
        )

    def missing_fraction(self) -> float:
        total = len(self.record_ids) * len(self.variant_order)
        if total == 0:
            return 0.0
        missing = sum(1 for row in self.predictions for v in row if v is None)
        return missing / total

    def save(self, path: str | Path) -> None:
        payload = {
            "record_ids": list(self.record_ids),
            "variant_order": [[s.value, r.value] for s, r in self.variant_order],
            "predictions": [list(row) for row in self.predictions],
        }
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", "utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "AuditMatrix":
        payload = json.loads(Path(path).read_text("utf-8"))
        return cls(
            record_ids=tuple(payload["record_ids"]),
            variant_order=tuple(
                (Sex(s), Race(r)) for s, r in payload["variant_order"]
            ),
            predictions=tuple(tuple(row) for row in payload["predictions"]),
        )


@dataclass(frozen=True)
class GroupMeans:
    cell_means: tuple[tuple[Sex, Race, Optional[float], int], ...]
    sex_means: tuple[tuple[Sex, Optional[float], int], ...]

    def cell(self, sex: Sex, race: Race) -> tuple[Optional[float], int]:
        for s, r, mean, n in self.cell_means:
            if s == sex and r == race:
                return mean, n
        raise KeyError((sex, race))

    def _defined(self) -> list[tuple[Sex, Race, float]]:
        return [(s, r, m) for s, r, m, _ in self.cell_means if m is not None]

    def most_prioritized(self) -> tuple[Sex, Race]:
        """Cell with the lowest mean acuity (lower number = higher urgency)."""
        cells = self._defined()
        best = min(cells, key=lambda c: (c[2], c[0].value, c[1].value))
        return best[0], best[1]

    def least_prioritized(self) -> tuple[Sex, Race]:
        cells = self._defined()
        worst = max(cells, key=lambda c: (c[2], c[0].value, c[1].value))
        return worst[0], worst[1]

    def most_affected(self) -> tuple[Sex, Race]:
        """Cell whose mean deviates most from the grand mean."""
        cells = self._defined()
        grand = sum(c[2] for c in cells) / len(cells)
        top = max(cells, key=lambda c: (abs(c[2] - grand), c[0].value, c[1].value))
        return top[0], top[1]

    def spread(self) -> float:
        """Max minus min defined cell mean; 0 means no group differs."""
        means = [c[2] for c in self._defined()]
        return max(means) - min(means)

    def to_dict(self) -> dict:
        most = self.most_prioritized()
        least = self.least_prioritized()
        affected = self.most_affected()
        return {
            "cells": [
                {"sex": s.value, "race": r.value, "mean": m, "n": n}
                for s, r, m, n in self.cell_means
            ],
            "sex_marginals": [
                {"sex": s.value, "mean": m, "n": n} for s, m, n in self.sex_means
            ],
            "most_prioritized": {"sex": most[0].value, "race": most[1].value},
            "least_prioritized": {"sex": least[0].value, "race": least[1].value},
            "most_affected": {"sex": affected[0].value, "race": affected[1].value},
            "spread": self.spread(),
        }


def group_means(matrix: AuditMatrix) -> GroupMeans:
    """Per-cell mean acuity over non-missing entries, plus sex marginals."""
    if not matrix.record_ids:
        raise AuditError("empty audit matrix")
    cells = []
    for sex, race in matrix.variant_order:
        values = [v for v in matrix.column(sex, race) if v is not None]
        mean = sum(values) / len(values) if values else None
        cells.append((sex, race, mean, len(values)))

    sex_rows = []
    for sex in SEX_ORDER:
        values = [
            v
            for s, race in matrix.variant_order
            if s == sex
            for v in matrix.column(s, race)
            if v is not None
        ]
        # Weighting each cell mean by its n is the same as pooling values.
        mean = sum(values) / len(values) if values else None
        sex_rows.append((sex, mean, len(values)))

    return GroupMeans(cell_means=tuple(cells), sex_means=tuple(sex_rows))


def run_audit(
    dataset: Dataset,
    strategy: StrategyConfig,
    endpoint: "ModelEndpoint",
    opts: SerializationOptions,
    gateway: "Gateway",
    demo_builder: Optional[DemoBuilder] = None,
    templates=None,
    abort_threshold: float = 0.2,
) -> AuditMatrix:
    """Evaluate all 12 variants of every record through one strategy.

    The demo builder, when present, must be configured with
    demographic-neutral serialization options; query prompts get the
    demographic sentence switched on regardless of `opts` because that
    sentence carries the intervention. Per-cell gateway or parse failures
    leave the cell missing; the run aborts only when more than
    `abort_threshold` of all cells are missing.
    """
    from .gateway import GatewayError  # deferred to avoid import cycle
    from .prompting import load_templates

    templates = templates or load_templates()
    query_opts = replace(opts, include_demographics=True)
    bundles: list[PromptBundle] = []
    for record in dataset:
        demos = demo_builder.demos_for(strategy, record) if demo_builder else []
        for variant in generate_variants(record):
            bundles.append(
                build_prompt(
                    strategy, variant.apply(record), demos, dataset.protocol, query_opts,
                    templates,
                )
            )

    predictions: list[tuple[Optional[int], ...]] = []
    results: list[Optional[int]] = []
    try:
        completions = gateway.complete_batch(endpoint, bundles)
        results = [c.parsed for c in completions]
    except GatewayError:
        # Per-cell failures: fall back to one-by-one so good cells survive.
        results = []
        for bundle in bundles:
            try:
                results.append(gateway.complete(endpoint, bundle).parsed)
            except GatewayError:
                results.append(None)

    width = len(VARIANT_ORDER)
    for i in range(len(dataset)):
        predictions.append(tuple(results[i * width : (i + 1) * width]))

    matrix = AuditMatrix(
        record_ids=tuple(r.id for r in dataset),
        variant_order=VARIANT_ORDER,
        predictions=tuple(predictions),
    )
    if matrix.missing_fraction() > abort_threshold:
        raise AbortThresholdError(
            f"{matrix.missing_fraction():.1%} of audit cells failed "
            f"(threshold {abort_threshold:.0%})"
        )
    return matrix


@dataclass(frozen=True)
class AuditTests:
    sex: TestResult
    race: TestResult
    sex_race: TestResult
    dropped_rows: int

    def to_dict(self) -> dict:
        return {
            "sex": self.sex.to_dict(),
            "race": self.race.to_dict(),
            "sex_race": self.sex_race.to_dict(),
            "dropped_rows": self.dropped_rows,
        }


def audit_tests(matrix: AuditMatrix) -> AuditTests:
    """The three paired hypothesis tests behind the audit report.

    Sex: Wilcoxon signed-rank on per-record (male mean over races) minus
    (female mean over races). Race: Friedman over six race treatments,
    averaging the two sexes per record. Sex & Race: Friedman over all
    twelve sex x race cells as treatments. Records with any missing cell
    are dropped listwise.
    """
    complete = matrix.complete_rows()
    dropped = len(matrix.record_ids) - len(complete)
    if len(complete) < 2:
        raise AuditError(f"only {len(complete)} complete audit rows; need at least 2")

    order = matrix.variant_order
    male_idx = [j for j, (s, _) in enumerate(order) if s == Sex.MALE]
    female_idx = [j for j, (s, _) in enumerate(order) if s == Sex.FEMALE]

    sex_diffs = [
        sum(row[j] for j in male_idx) / len(male_idx)
        - sum(row[j] for j in female_idx) / len(female_idx)
        for row in complete
    ]

    race_matrix = []
    for row in complete:
        race_row = []
        for race in RACE_ORDER:
            cols = [j for j, (_, r) in enumerate(order) if r == race]
            race_row.append(sum(row[j] for j in cols) / len(cols))
        race_matrix.append(race_row)

    return AuditTests(
        sex=wilcoxon_signed_rank(sex_diffs),
        race=friedman(race_matrix),
        sex_race=friedman([list(row) for row in complete]),
        dropped_rows=dropped,
    )


def significance_stars(p: float) -> str:
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


def _format_p(p: float) -> str:
    if p < 0.01:
        return "<0.01**"
    stars = significance_stars(p)
    return f"{p:.3f}{stars}" if stars else f"{p:.2f}"


# Table rows follow the published layout: races alphabetical by display
# label within each sex block.
_DISPLAY_RACES = tuple(sorted(RACE_ORDER, key=lambda r: r.label))


def render_audit_table(
    columns: Sequence[tuple[str, GroupMeans, AuditTests, int]],
) -> str:
    """Text table of group means and corrected p-values.

    `columns` holds (label, group means, tests, bonferroni m) per audited
    strategy/endpoint combination. The most-prioritized cell in each column
    is marked with ``+`` and the least-prioritized with ``-``.
    """
    from .stats import bonferroni

    label_width = 36
    col_width = 18
    header = "Demographic".ljust(label_width) + "".join(
        label[:col_width - 1].rjust(col_width) for label, *_ in columns
    )
    lines = [header, "-" * len(header)]

    def cell_text(gm: GroupMeans, sex: Sex, race: Race) -> str:
        mean, _ = gm.cell(sex, race)
        if mean is None:
            return "missing"
        marks = ""
        # Markers are meaningless when no group differs from any other.
        if gm.spread() > 0:
            if (sex, race) == gm.most_prioritized():
                marks = " +"
            elif (sex, race) == gm.least_prioritized():
                marks = " -"
        return f"{mean:.3f}{marks}"

    for sex, block in ((Sex.MALE, "Men"), (Sex.FEMALE, "Women")):
        row = block.ljust(label_width)
        for _, gm, _, _ in columns:
            mean = next(m for s, m, _ in gm.sex_means if s == sex)
            row += (f"{mean:.3f}" if mean is not None else "missing").rjust(col_width)
        lines.append(row)
        for race in _DISPLAY_RACES:
            row = f"  {race.label}".ljust(label_width)
            for _, gm, _, _ in columns:
                row += cell_text(gm, sex, race).rjust(col_width)
            lines.append(row)

    for test_name, pick in (
        ("Sex", lambda t: t.sex),
        ("Race", lambda t: t.race),
        ("Sex & Race", lambda t: t.sex_race),
    ):
        row = test_name.ljust(label_width)
        for _, _, tests, m in columns:
            corrected = bonferroni(pick(tests).p_value, m)
            row += _format_p(corrected).rjust(col_width)
        lines.append(row)

    return "\n".join(lines) + "\n"
