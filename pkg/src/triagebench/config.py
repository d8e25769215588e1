"""Declarative experiment configuration.

Experiments are described by a single YAML file so they can be versioned
and diffed; command-line flags only override config keys. All randomness
flows from the one top-level seed through named sub-seeds (dataset, split,
demos, mock), so components are independently reproducible. Validation
collects every finding before anything runs; commands refuse to start
while findings remain.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .dataset import Protocol, Race, Sex, SplitSpec
from .gateway import MockKind, MockSpec, ModelEndpoint
from .prompting import StrategyConfig, StrategyKind
from .serialize import SerializationOptions, SerializationStyle
from .util import stable_hash, stable_json, sub_seed


class ConfigError(Exception):
    """Raised when a command is asked to run over an invalid config."""

    def __init__(self, findings: list["Finding"]):
        self.findings = findings
        super().__init__(
            "invalid config:\n" + "\n".join(f"  {f.key}: {f.message}" for f in findings)
        )


@dataclass(frozen=True)
class Finding:
    key: str
    message: str


@dataclass(frozen=True)
class DatasetSource:
    source: str = "synthetic"  # "synthetic" | "file"
    n: int = 2000
    missingness: float = 0.15
    path: Optional[str] = None
    schema_map: tuple[tuple[str, str], ...] = ()
    delimiter: str = ","


@dataclass(frozen=True)
class AuditSettings:
    enabled: bool = False
    bonferroni_m: int = 10
    max_records: int = 200
    abort_threshold: float = 0.2


@dataclass(frozen=True)
class EmbeddingSettings:
    dim: int = 32
    endpoint: str = "default"
    store_path: Optional[str] = None
    text_source: str = "chief_complaint"  # or "full_record"


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    output_dir: str
    protocol: Protocol
    dataset: DatasetSource
    serialization: SerializationOptions
    strategies: tuple[tuple[StrategyConfig, str], ...]  # (strategy, endpoint name)
    endpoints: tuple[tuple[str, ModelEndpoint], ...]
    split: Optional[SplitSpec] = None
    train_path: Optional[str] = None
    test_path: Optional[str] = None
    embeddings: EmbeddingSettings = field(default_factory=EmbeddingSettings)
    audit: AuditSettings = field(default_factory=AuditSettings)
    sweep_shots: tuple[int, ...] = ()
    templates_path: Optional[str] = None
    cache_dir: Optional[str] = None
    raw: dict = field(default_factory=dict, compare=False)

    def endpoint(self, name: str) -> ModelEndpoint:
        for ep_name, ep in self.endpoints:
            if ep_name == name:
                return ep
        raise KeyError(f"no endpoint named {name!r}")

    def config_hash(self) -> str:
        return stable_hash(stable_json(self.raw))


_STRATEGY_NAMES = sorted(kind.value for kind in StrategyKind)
_STYLE_NAMES = sorted(style.value for style in SerializationStyle)


def _parse_mock(raw: dict, findings: list[Finding], key: str) -> Optional[MockSpec]:
    if not raw:
        return None
    kind_name = raw.get("kind", "rule-based")
    try:
        kind = MockKind(kind_name)
    except ValueError:
        findings.append(Finding(f"{key}.kind", f"unknown mock kind {kind_name!r}"))
        return None
    offsets = []
    for cell, offset in (raw.get("bias_offsets") or {}).items():
        try:
            sex_name, race_name = cell.split("|", 1)
            offsets.append(((Sex(sex_name), Race(race_name)), float(offset)))
        except ValueError:
            findings.append(
                Finding(
                    f"{key}.bias_offsets",
                    f"expected 'Sex|Race' keys like 'Female|Black', got {cell!r}",
                )
            )
    return MockSpec(
        kind=kind,
        bias_offsets=tuple(offsets),
        bias_application_rate=float(raw.get("bias_application_rate", 1.0)),
    )


def _parse_endpoint(name: str, raw: dict, findings: list[Finding], seed: int) -> ModelEndpoint:
    key = f"endpoints.{name}"
    base_url = raw.get("base_url", "")
    if not base_url:
        findings.append(Finding(f"{key}.base_url", "endpoint base_url is required"))
    mock = _parse_mock(raw.get("mock") or {}, findings, f"{key}.mock")
    if base_url.startswith("mock:") and mock is None:
        mock = MockSpec()
    extra = tuple(sorted((raw.get("extra_params") or {}).items()))
    return ModelEndpoint(
        base_url=base_url,
        model_name=raw.get("model_name", "default"),
        temperature=float(raw.get("temperature", 0.0)),
        max_in_flight=int(raw.get("max_in_flight", 4)),
        max_attempts=int(raw.get("max_attempts", 3)),
        base_backoff=float(raw.get("base_backoff", 0.5)),
        timeout=float(raw.get("timeout", 60.0)),
        api_key_env=raw.get("api_key_env", ""),
        extra_params=extra,
        mock=mock,
        mock_seed=sub_seed(seed, "mock"),
    )


def _parse_strategy(raw: dict, seed: int, findings: list[Finding], index: int):
    key = f"strategies[{index}]"
    kind_name = raw.get("kind", "")
    try:
        kind = StrategyKind(kind_name)
    except ValueError:
        findings.append(
            Finding(
                f"{key}.kind",
                f"unknown strategy {kind_name!r}; valid: {', '.join(_STRATEGY_NAMES)}",
            )
        )
        return None
    try:
        strategy = StrategyConfig(
            kind=kind,
            shots=int(raw.get("shots", 0)),
            seed=int(raw.get("seed", sub_seed(seed, f"demos:{kind.value}"))),
            autocot_clusters=int(raw.get("autocot_clusters", 5)),
        )
    except ValueError as exc:
        findings.append(Finding(key, str(exc)))
        return None
    return strategy, raw.get("endpoint", "default")


def load_config(
    path: str | Path, overrides: Optional[dict] = None
) -> tuple[ExperimentConfig, list[Finding]]:
    """Parse a config file, returning the config and all validation findings.

    Structural problems (unknown strategy names, bad enum values, missing
    files) become findings rather than exceptions so `validate` can report
    them exhaustively in one pass. `overrides` maps top-level config keys
    (from command-line flags) onto replacement values.
    """
    path = Path(path)
    findings: list[Finding] = []
    raw = yaml.safe_load(path.read_text("utf-8")) or {}
    for key, value in (overrides or {}).items():
        if value is not None:
            raw[key] = value

    seed = int(raw.get("seed", 0))
    protocol_name = raw.get("protocol", "ESI")
    try:
        protocol = Protocol(protocol_name)
    except ValueError:
        findings.append(Finding("protocol", f"unknown protocol {protocol_name!r}; valid: ESI, KTAS"))
        protocol = Protocol.ESI

    ds_raw = raw.get("dataset") or {}
    dataset = DatasetSource(
        source=ds_raw.get("source", "synthetic"),
        n=int(ds_raw.get("n", 2000)),
        missingness=float(ds_raw.get("missingness", 0.15)),
        path=ds_raw.get("path"),
        schema_map=tuple(sorted((ds_raw.get("schema_map") or {}).items())),
        delimiter=ds_raw.get("delimiter", ","),
    )
    if dataset.source not in ("synthetic", "file"):
        findings.append(Finding("dataset.source", f"unknown source {dataset.source!r}"))
    if dataset.source == "file":
        if not dataset.path:
            findings.append(Finding("dataset.path", "file source requires a path"))
        elif not Path(dataset.path).exists():
            findings.append(Finding("dataset.path", f"file not found: {dataset.path}"))

    ser_raw = raw.get("serialization") or {}
    style_name = ser_raw.get("style", "natural")
    try:
        style = SerializationStyle(style_name)
    except ValueError:
        findings.append(
            Finding("serialization.style",
                    f"unknown style {style_name!r}; valid: {', '.join(_STYLE_NAMES)}")
        )
        style = SerializationStyle.NATURAL
    try:
        serialization = SerializationOptions(
            style=style,
            include_demographics=bool(ser_raw.get("include_demographics", False)),
            demographic_template=ser_raw.get(
                "demographic_template", "The patient is a {race} {sex}."
            ),
            missing_token=ser_raw.get("missing_token", "NA"),
        )
    except ValueError as exc:
        findings.append(Finding("serialization.demographic_template", str(exc)))
        serialization = SerializationOptions(style=style)

    split = None
    split_raw = raw.get("split")
    if split_raw:
        try:
            split = SplitSpec(
                train_year_range=tuple(split_raw["train_years"]),
                test_year_range=tuple(split_raw["test_years"]),
                train_n=int(split_raw["train_n"]),
                test_n=int(split_raw["test_n"]),
                seed=int(split_raw.get("seed", sub_seed(seed, "split"))),
            )
        except (KeyError, ValueError, TypeError) as exc:
            findings.append(Finding("split", f"invalid split spec: {exc}"))

    for key in ("train_path", "test_path"):
        value = raw.get(key)
        if value and not Path(value).exists():
            findings.append(Finding(key, f"file not found: {value}"))
    if split is None and dataset.source == "file" and not (
        raw.get("train_path") and raw.get("test_path")
    ):
        findings.append(
            Finding("split", "file datasets need either a split spec or train_path/test_path")
        )

    strategies = []
    for i, s_raw in enumerate(raw.get("strategies") or []):
        parsed = _parse_strategy(s_raw, seed, findings, i)
        if parsed is not None:
            strategies.append(parsed)
    if not strategies:
        findings.append(Finding("strategies", "at least one strategy is required"))

    endpoints_raw = raw.get("endpoints")
    if not endpoints_raw and raw.get("endpoint"):
        endpoints_raw = {"default": raw["endpoint"]}
    if not endpoints_raw:
        findings.append(Finding("endpoints", "at least one endpoint is required"))
        endpoints_raw = {"default": {"base_url": "mock:rule-based", "model_name": "rule-based"}}
    endpoints = tuple(
        (name, _parse_endpoint(name, ep_raw or {}, findings, seed))
        for name, ep_raw in endpoints_raw.items()
    )
    endpoint_names = {name for name, _ in endpoints}
    for strategy, ep_name in strategies:
        if ep_name not in endpoint_names:
            findings.append(
                Finding("strategies", f"{strategy.label()} references unknown endpoint {ep_name!r}")
            )

    emb_raw = raw.get("embeddings") or {}
    embeddings = EmbeddingSettings(
        dim=int(emb_raw.get("dim", 32)),
        endpoint=emb_raw.get("endpoint", "default"),
        store_path=emb_raw.get("store_path"),
        text_source=emb_raw.get("text_source", "chief_complaint"),
    )
    if embeddings.endpoint not in endpoint_names:
        findings.append(
            Finding("embeddings.endpoint", f"unknown endpoint {embeddings.endpoint!r}")
        )
    if embeddings.text_source not in ("chief_complaint", "full_record"):
        findings.append(
            Finding("embeddings.text_source",
                    f"expected chief_complaint or full_record, got {embeddings.text_source!r}")
        )

    # An `audit:` section switches the audit path on unless explicitly off.
    audit_raw = raw.get("audit") or {}
    audit = AuditSettings(
        enabled=bool(audit_raw.get("enabled", "audit" in raw)),
        bonferroni_m=int(audit_raw.get("bonferroni_m", 10)),
        max_records=int(audit_raw.get("max_records", 200)),
        abort_threshold=float(audit_raw.get("abort_threshold", 0.2)),
    )
    if audit.bonferroni_m < 1:
        findings.append(Finding("audit.bonferroni_m", "family size must be >= 1"))

    sweep_shots = tuple(int(v) for v in raw.get("sweep", {}).get("shots", []) or [])
    if sweep_shots and any(b <= a for a, b in zip(sweep_shots, sweep_shots[1:])):
        findings.append(Finding("sweep.shots", "shot counts must be strictly increasing"))

    templates_path = raw.get("templates")
    if templates_path and not Path(templates_path).exists():
        findings.append(Finding("templates", f"file not found: {templates_path}"))

    config = ExperimentConfig(
        seed=seed,
        output_dir=raw.get("output_dir", "out"),
        protocol=protocol,
        dataset=dataset,
        serialization=serialization,
        strategies=tuple(strategies),
        endpoints=endpoints,
        split=split,
        train_path=raw.get("train_path"),
        test_path=raw.get("test_path"),
        embeddings=embeddings,
        audit=audit,
        sweep_shots=sweep_shots,
        templates_path=templates_path,
        cache_dir=raw.get("cache_dir"),
        raw=raw,
    )
    return config, findings


def require_valid(config: ExperimentConfig, findings: list[Finding]) -> ExperimentConfig:
    if findings:
        raise ConfigError(findings)
    return config


def check_endpoint_reachability(config: ExperimentConfig) -> list[Finding]:
    """Optional reachability probe; mocks are always reachable."""
    import requests

    findings = []
    for name, endpoint in config.endpoints:
        if endpoint.is_mock:
            continue
        try:
            requests.head(endpoint.base_url, timeout=min(endpoint.timeout, 10.0))
        except requests.RequestException as exc:
            findings.append(Finding(f"endpoints.{name}", f"unreachable: {exc}"))
    return findings
