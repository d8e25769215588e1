"""Chat-completion and embeddings client with caching, retries, and mocks.

Speaks the de-facto chat-completions JSON wire shape (messages array with
role/content) against any compatible server, plus two in-process mock
models for offline runs: a deterministic vitals-threshold rule and a
biased variant that shifts specific demographic groups. Responses are
cached in an append-only line-delimited file keyed by endpoint identity
and the full serialized request, so reruns are exact and issue no network
calls. This is the only concurrent component: batch evaluation fans out
to at most ``max_in_flight`` worker threads and reassembles results in
input order.
"""
from __future__ import annotations

import json
import os
import random
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Mapping, Optional, Sequence

import requests

from .dataset import Demographics, Race, Sex, TriageRecord, validate_acuity
from .util import round_half_away_from_zero, stable_hash, stable_json, sub_seed

if TYPE_CHECKING:
    from .prompting import PromptBundle

MOCK_URL_PREFIX = "mock:"


class GatewayError(Exception):
    pass


class AuthMissingError(GatewayError):
    pass


class ExhaustedError(GatewayError):
    """All retry attempts failed; carries the last transport error."""


class MockKind(str, Enum):
    RULE_BASED = "rule-based"
    BIASED = "biased"


@dataclass(frozen=True)
class MockSpec:
    kind: MockKind = MockKind.RULE_BASED
    bias_offsets: tuple[tuple[tuple[Sex, Race], float], ...] = ()
    bias_application_rate: float = 1.0

    def offset_for(self, sex: Optional[Sex], race: Optional[Race]) -> float:
        for (s, r), offset in self.bias_offsets:
            if s == sex and r == race:
                return offset
        return 0.0


@dataclass(frozen=True)
class ModelEndpoint:
    base_url: str
    model_name: str
    temperature: float = 0.0
    max_in_flight: int = 4
    max_attempts: int = 3
    base_backoff: float = 0.5
    timeout: float = 60.0
    api_key_env: str = ""
    extra_params: tuple[tuple[str, object], ...] = ()
    mock: Optional[MockSpec] = None
    mock_seed: int = 0

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")

    @property
    def is_mock(self) -> bool:
        return self.base_url.startswith(MOCK_URL_PREFIX)

    def identity(self) -> str:
        return stable_json(
            {
                "base_url": self.base_url,
                "model": self.model_name,
                "temperature": self.temperature,
                "extra": dict(self.extra_params),
                "mock_seed": self.mock_seed if self.is_mock else None,
            }
        )


@dataclass(frozen=True)
class CompletionResult:
    raw_text: str
    parsed: Optional[int]
    parse_error: Optional[str]
    latency_ms: float
    attempts: int
    from_cache: bool = False


def rule_based_acuity(record: TriageRecord) -> int:
    """Deterministic vitals-threshold triage score.

    Starts at level 5 and caps downward as findings worsen: moderate pain
    (4-6) caps at 4; severe pain (>= 7), heart rate > 100, or respiratory
    rate > 24 caps at 3; SpO2 < 92 or systolic BP < 90 caps at 2; SpO2 < 85
    or heart rate > 140 forces 1. Missing measurements skip their rule.
    """
    v = record.vitals
    score = 5
    if record.pain is not None and 4 <= record.pain <= 6:
        score = min(score, 4)
    if (
        (record.pain is not None and record.pain >= 7)
        or (v.heart_rate is not None and v.heart_rate > 100)
        or (v.respiratory_rate is not None and v.respiratory_rate > 24)
    ):
        score = min(score, 3)
    if (v.spo2 is not None and v.spo2 < 92) or (
        v.systolic_bp is not None and v.systolic_bp < 90
    ):
        score = min(score, 2)
    if (v.spo2 is not None and v.spo2 < 85) or (
        v.heart_rate is not None and v.heart_rate > 140
    ):
        score = 1
    return score


def mock_predict(
    spec: MockSpec,
    record: TriageRecord,
    variant_demographics: Demographics,
    seed: int,
) -> int:
    """Mock model prediction for one record.

    The biased variant adds the configured (sex, race) offset with
    probability ``bias_application_rate``; the deciding uniform draw is
    keyed by record id alone so all counterfactual variants of one record
    share it. Results round half away from zero and clamp to [1, 5].
    """
    base = rule_based_acuity(record)
    if spec.kind is MockKind.RULE_BASED:
        return base
    draw = random.Random(sub_seed(seed, f"bias:{record.id}")).random()
    if draw >= spec.bias_application_rate:
        return base
    offset = spec.offset_for(variant_demographics.sex, variant_demographics.race)
    shifted = round_half_away_from_zero(base + offset)
    return max(1, min(5, shifted))


_ACUITY_PATTERN = re.compile(r"acuity\s*:\s*([1-5])", re.IGNORECASE)
# Standalone digit: not glued to another digit/letter and not a decimal.
_STANDALONE_DIGIT = re.compile(r"(?<![0-9A-Za-z.])([1-5])(?![0-9A-Za-z]|\.[0-9])")


def parse_acuity(raw_text: str) -> tuple[Optional[int], Optional[str]]:
    """Extract the final acuity level from a model response.

    Takes the last "Acuity: N" occurrence; failing that, the last
    standalone digit 1-5 on the final non-empty line. Never raises:
    unparseable text yields (None, "Unparseable").
    """
    matches = _ACUITY_PATTERN.findall(raw_text)
    if matches:
        return validate_acuity(int(matches[-1])), None
    lines = [line for line in raw_text.splitlines() if line.strip()]
    if lines:
        digits = _STANDALONE_DIGIT.findall(lines[-1])
        if digits:
            return validate_acuity(int(digits[-1])), None
    return None, "Unparseable"


def bundle_messages(bundle: "PromptBundle") -> list[dict[str, str]]:
    """Chat messages for a prompt bundle: system, demo turns, query turn."""
    messages = [{"role": "system", "content": bundle.system_message}]
    for demo in bundle.demonstrations:
        messages.append({"role": "user", "content": demo.input_text})
        answer = f"Acuity: {demo.answer}"
        if demo.rationale:
            answer = demo.rationale.rstrip() + "\n" + answer
        messages.append({"role": "assistant", "content": answer})
    messages.append(
        {"role": "user", "content": bundle.query_text + "\n\n" + bundle.answer_format_instruction}
    )
    return messages


class ResponseCache:
    """Append-only line-delimited {key, <value_field>} cache.

    Safe for concurrent readers with serialized writers; hits never change
    results because keys cover the endpoint identity and the entire
    serialized request.
    """

    def __init__(self, path: Optional[Path], value_field: str = "raw_text"):
        self._path = path
        self._field = value_field
        self._lock = threading.Lock()
        self._entries: dict[str, str] = {}
        if path is not None and path.exists():
            with open(path, "r", encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        row = json.loads(line)
                        self._entries[row["key"]] = row[value_field]

    def get(self, key: str) -> Optional[str]:
        with self._lock:
            return self._entries.get(key)

    def put(self, key: str, value: str) -> None:
        with self._lock:
            if key in self._entries:
                return
            self._entries[key] = value
            if self._path is not None:
                self._path.parent.mkdir(parents=True, exist_ok=True)
                with open(self._path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"key": key, self._field: value}) + "\n")

    def __len__(self) -> int:
        return len(self._entries)


class Gateway:
    """Drives completion and embeddings endpoints with caching and retries."""

    def __init__(self, cache_dir: Optional[str | Path] = None):
        cache_dir = Path(cache_dir) if cache_dir is not None else None
        self._completions = ResponseCache(
            cache_dir / "completions.jsonl" if cache_dir else None
        )
        self._embeddings = ResponseCache(
            cache_dir / "embeddings.jsonl" if cache_dir else None
        )
        self._counter_lock = threading.Lock()
        self.requests_sent = 0
        self.cache_hits = 0

    def _count(self, *, hit: bool) -> None:
        with self._counter_lock:
            if hit:
                self.cache_hits += 1
            else:
                self.requests_sent += 1

    # -- completions ----------------------------------------------------

    def complete(self, endpoint: ModelEndpoint, bundle: "PromptBundle") -> CompletionResult:
        messages = bundle_messages(bundle)
        key = stable_hash(endpoint.identity() + "|" + self._request_key(endpoint, bundle, messages))

        cached = self._completions.get(key)
        if cached is not None:
            self._count(hit=True)
            parsed, parse_error = parse_acuity(cached)
            return CompletionResult(cached, parsed, parse_error, 0.0, 0, from_cache=True)

        start = time.monotonic()
        if endpoint.is_mock:
            raw_text = self._mock_complete(endpoint, bundle)
            attempts = 1
        else:
            raw_text, attempts = self._http_complete(endpoint, messages)
        latency_ms = (time.monotonic() - start) * 1000.0

        self._count(hit=False)
        self._completions.put(key, raw_text)
        parsed, parse_error = parse_acuity(raw_text)
        return CompletionResult(raw_text, parsed, parse_error, latency_ms, attempts)

    def complete_batch(
        self, endpoint: ModelEndpoint, bundles: Sequence["PromptBundle"]
    ) -> list[CompletionResult]:
        """Evaluate bundles concurrently; results come back in input order."""
        if not bundles:
            return []
        with ThreadPoolExecutor(max_workers=endpoint.max_in_flight) as pool:
            return list(pool.map(lambda b: self.complete(endpoint, b), bundles))

    def _request_key(
        self,
        endpoint: ModelEndpoint,
        bundle: "PromptBundle",
        messages: list[dict[str, str]],
    ) -> str:
        payload: dict = {"messages": messages}
        if endpoint.is_mock and bundle.query_record is not None:
            # Distinct records can serialize to identical prompt text, but
            # the biased mock draws per record id; key those apart.
            payload["record_id"] = bundle.query_record.id
        return stable_json(payload)

    def _mock_complete(self, endpoint: ModelEndpoint, bundle: "PromptBundle") -> str:
        spec = endpoint.mock or MockSpec()
        record = bundle.query_record
        if record is None:
            raise GatewayError("mock endpoints require bundles built from a TriageRecord")
        level = mock_predict(spec, record, record.demographics, endpoint.mock_seed)
        return (
            "Reviewed the chief complaint and the available measurements; "
            f"the dominant finding sets the urgency.\nAcuity: {level}"
        )

    def _http_complete(
        self, endpoint: ModelEndpoint, messages: list[dict[str, str]]
    ) -> tuple[str, int]:
        body = {
            "model": endpoint.model_name,
            "temperature": endpoint.temperature,
            "messages": messages,
        }
        body.update(dict(endpoint.extra_params))
        data, attempts = self._http_post(endpoint, "/chat/completions", body)
        try:
            return data["choices"][0]["message"]["content"], attempts
        except (KeyError, IndexError, TypeError) as exc:
            raise GatewayError(f"malformed completion response: {exc}") from exc

    # -- embeddings ------------------------------------------------------

    def embed(self, endpoint: ModelEndpoint, texts: Sequence[str]) -> list[list[float]]:
        """One vector per input text, order preserving, write-through cached."""
        results: list[Optional[list[float]]] = [None] * len(texts)
        misses: list[int] = []
        for i, text in enumerate(texts):
            key = stable_hash(endpoint.identity() + "|embed|" + text)
            cached = self._embeddings.get(key)
            if cached is not None:
                self._count(hit=True)
                results[i] = json.loads(cached)
            else:
                misses.append(i)

        if misses:
            if endpoint.is_mock:
                vectors = [self._mock_embedding(endpoint, texts[i]) for i in misses]
                for _ in misses:
                    self._count(hit=False)
            else:
                body = {"model": endpoint.model_name, "input": [texts[i] for i in misses]}
                data, _ = self._http_post(endpoint, "/embeddings", body)
                rows = sorted(data["data"], key=lambda r: r["index"])
                vectors = [row["embedding"] for row in rows]
                self._count(hit=False)
            for i, vector in zip(misses, vectors):
                key = stable_hash(endpoint.identity() + "|embed|" + texts[i])
                self._embeddings.put(key, json.dumps(vector))
                results[i] = vector

        return [r for r in results if r is not None]

    def _mock_embedding(self, endpoint: ModelEndpoint, text: str) -> list[float]:
        dim = int(dict(endpoint.extra_params).get("embedding_dim", 32))
        rng = random.Random(int(stable_hash(text), 16) % 2**63)
        return [rng.uniform(-1.0, 1.0) for _ in range(dim)]

    # -- transport -------------------------------------------------------

    def _http_post(self, endpoint: ModelEndpoint, route: str, body: dict) -> tuple[dict, int]:
        headers = {"Content-Type": "application/json"}
        if endpoint.api_key_env:
            key = os.environ.get(endpoint.api_key_env)
            if not key:
                raise AuthMissingError(
                    f"endpoint requires API key in ${endpoint.api_key_env}, which is unset"
                )
            headers["Authorization"] = f"Bearer {key}"

        url = endpoint.base_url.rstrip("/") + route
        last_error: Exception | str = "no attempts made"
        for attempt in range(1, endpoint.max_attempts + 1):
            try:
                response = requests.post(url, json=body, headers=headers, timeout=endpoint.timeout)
            except requests.RequestException as exc:
                last_error = exc
            else:
                if response.status_code == 200:
                    return response.json(), attempt
                if response.status_code == 429 or response.status_code >= 500:
                    last_error = f"HTTP {response.status_code}: {response.text[:200]}"
                else:
                    raise GatewayError(
                        f"HTTP {response.status_code} from {url}: {response.text[:200]}"
                    )
            if attempt < endpoint.max_attempts:
                time.sleep(endpoint.base_backoff * 2 ** (attempt - 1))
        raise ExhaustedError(f"{url} failed after {endpoint.max_attempts} attempts: {last_error}")

    def stats(self) -> dict[str, int]:
        return {"requests": self.requests_sent, "cache_hits": self.cache_hits}
