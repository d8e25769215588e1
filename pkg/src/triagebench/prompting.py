"""Assemble prompts for the eight evaluation strategies.

Covers demonstration selection (acuity-stratified random sampling,
cluster-representative selection with generated rationales, and two-stage
nearest-neighbor retrieval) and the final message bundle. Demonstration
answers always come from gold labels; rationales for the chain-of-thought
variants are generated once per record through the gateway and cached.
"""
from __future__ import annotations

import random
import re
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np
import yaml

from .dataset import Dataset, Protocol, TriageRecord
from .retrieval import (
    EmbeddingStore,
    PoolTooSmallError,
    VitalsNormalizer,
    rerank_by_vitals,
    text_similarity_ranking,
)
from .serialize import SerializationOptions, serialize_record
from .util import largest_remainder, stable_hash, sub_seed

if TYPE_CHECKING:
    from .gateway import Gateway, ModelEndpoint, ResponseCache

_PROTOCOL_LABELS = {
    Protocol.ESI: "Emergency Severity Index (ESI)",
    Protocol.KTAS: "Korean Triage and Acuity Scale (KTAS)",
}


class PromptingError(Exception):
    pass


class ShotMismatchError(PromptingError):
    pass


class ShotsExceedTrainError(PromptingError):
    pass


class StrategyKind(str, Enum):
    ZERO_SHOT_VANILLA = "zero_shot_vanilla"
    ZERO_SHOT_COT = "zero_shot_cot"
    AUTO_COT = "auto_cot"
    FEW_SHOT = "few_shot"
    FEW_SHOT_COT = "few_shot_cot"
    KATE = "kate"
    KATE_COT = "kate_cot"
    FINE_TUNED_EXTERNAL = "fine_tuned_external"


_SHOT_KINDS = frozenset(
    {StrategyKind.FEW_SHOT, StrategyKind.FEW_SHOT_COT, StrategyKind.KATE, StrategyKind.KATE_COT}
)
_COT_KINDS = frozenset(
    {StrategyKind.ZERO_SHOT_COT, StrategyKind.AUTO_COT, StrategyKind.FEW_SHOT_COT,
     StrategyKind.KATE_COT}
)
_RETRIEVAL_KINDS = frozenset({StrategyKind.KATE, StrategyKind.KATE_COT, StrategyKind.AUTO_COT})


@dataclass(frozen=True)
class StrategyConfig:
    kind: StrategyKind
    shots: int = 0
    seed: int = 0
    autocot_clusters: int = 5

    def __post_init__(self):
        if self.kind in _SHOT_KINDS:
            if self.shots <= 0:
                raise ValueError(f"{self.kind.value} requires shots > 0")
        elif self.shots != 0:
            raise ValueError(f"{self.kind.value} is zero-shot; shots must be 0")
        if self.kind is StrategyKind.AUTO_COT and self.autocot_clusters < 1:
            raise ValueError("auto_cot requires autocot_clusters >= 1")

    @property
    def is_cot(self) -> bool:
        return self.kind in _COT_KINDS

    @property
    def uses_retrieval(self) -> bool:
        return self.kind in _RETRIEVAL_KINDS

    def label(self) -> str:
        if self.kind in _SHOT_KINDS:
            return f"{self.kind.value}[{self.shots}]"
        if self.kind is StrategyKind.AUTO_COT:
            return f"{self.kind.value}[{self.autocot_clusters}]"
        return self.kind.value

    def expected_demos(self) -> int:
        if self.kind in _SHOT_KINDS:
            return self.shots
        if self.kind is StrategyKind.AUTO_COT:
            return self.autocot_clusters
        return 0


@dataclass(frozen=True)
class Demonstration:
    input_text: str
    answer: int
    rationale: Optional[str] = None


@dataclass(frozen=True)
class PromptBundle:
    system_message: str
    demonstrations: tuple[Demonstration, ...]
    query_text: str
    answer_format_instruction: str
    # Carried for in-process mock models only; never serialized to the wire.
    query_record: Optional[TriageRecord] = None


@dataclass(frozen=True)
class PromptTemplates:
    system_base: str
    cot_instruction: str
    answer_format: str


def load_templates(path: Optional[str | Path] = None) -> PromptTemplates:
    """Load prompt wording from a template file (package default if None)."""
    if path is None:
        text = resources.files("triagebench").joinpath("templates/default.yaml").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    data = yaml.safe_load(text)
    return PromptTemplates(
        system_base=data["system_base"],
        cot_instruction=data["cot_instruction"],
        answer_format=data["answer_format"],
    )


def build_prompt(
    strategy: StrategyConfig,
    record: TriageRecord,
    demos: Sequence[Demonstration],
    protocol: Protocol,
    opts: SerializationOptions,
    templates: Optional[PromptTemplates] = None,
) -> PromptBundle:
    """Assemble the full prompt bundle for one query record."""
    expected = strategy.expected_demos()
    if len(demos) != expected:
        raise ShotMismatchError(
            f"{strategy.label()} expects {expected} demonstrations, got {len(demos)}"
        )
    templates = templates or load_templates()

    parts = [templates.system_base.format(protocol_label=_PROTOCOL_LABELS[protocol])]
    if strategy.is_cot:
        parts.append(templates.cot_instruction)
    parts.append(templates.answer_format)
    system_message = "\n\n".join(parts)

    return PromptBundle(
        system_message=system_message,
        demonstrations=tuple(demos),
        query_text=serialize_record(record, opts),
        answer_format_instruction=templates.answer_format,
        query_record=record,
    )


def _stratified_random_records(
    train: Dataset, shots: int, seed: int, exclude_ids: frozenset[str]
) -> list[TriageRecord]:
    eligible = [r for r in train.labeled() if r.id not in exclude_ids]
    if shots > len(eligible):
        raise ShotsExceedTrainError(f"shots={shots} exceeds {len(eligible)} eligible records")

    by_level: dict[int, list[TriageRecord]] = {}
    for r in eligible:
        by_level.setdefault(r.label, []).append(r)
    quotas = largest_remainder({level: len(rs) for level, rs in by_level.items()}, shots)

    picked: list[TriageRecord] = []
    for level in sorted(by_level):
        members = sorted(by_level[level], key=lambda r: r.id)
        rng = random.Random(sub_seed(seed, f"demos:level:{level}"))
        picked.extend(rng.sample(members, quotas[level]))
    return picked


def select_demos_random(
    train: Dataset,
    shots: int,
    seed: int,
    opts: SerializationOptions,
    exclude_ids: frozenset[str] = frozenset(),
) -> list[Demonstration]:
    """Acuity-stratified random demonstrations with gold-label answers.

    Per-level quotas are apportioned by largest remainder over the level
    distribution of the labeled training pool, so the sample mirrors the
    pool's acuity mix. Deterministic per seed.
    """
    return [
        Demonstration(input_text=serialize_record(r, opts), answer=r.label)
        for r in _stratified_random_records(train, shots, seed, exclude_ids)
    ]


def _kmeans(vectors: np.ndarray, k: int, seed: int, iterations: int = 25) -> np.ndarray:
    """Lloyd's algorithm with a fixed seed and iteration count.

    Returns the final cluster assignment. Empty clusters are re-seeded from
    the point farthest from its assigned centroid, keeping every cluster
    populated.
    """
    n = vectors.shape[0]
    rng = random.Random(seed)
    centroids = vectors[rng.sample(range(n), k)].copy()
    assignment = np.zeros(n, dtype=np.int64)
    for _ in range(iterations):
        distances = ((vectors[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assignment = distances.argmin(axis=1)
        for j in range(k):
            members = vectors[assignment == j]
            if len(members) == 0:
                farthest = int(distances[np.arange(n), assignment].argmax())
                centroids[j] = vectors[farthest]
                assignment[farthest] = j
            else:
                centroids[j] = members.mean(axis=0)
    return assignment


_TRAILING_ACUITY_LINE = re.compile(r"\n?\s*acuity\s*:\s*[1-5]\s*$", re.IGNORECASE)


def _strip_answer_line(text: str) -> str:
    return _TRAILING_ACUITY_LINE.sub("", text).strip()


class DemoBuilder:
    """Builds per-strategy demonstration lists against a fixed training pool.

    Holds the shared retrieval machinery and the rationale cache. Random
    and AutoCoT selections are independent of the query record and reused
    across queries; retrieval-based selections are computed per query. The
    query record is always excluded at the id level.
    """

    def __init__(
        self,
        train: Dataset,
        protocol: Protocol,
        opts: SerializationOptions,
        templates: Optional[PromptTemplates] = None,
        text_store: Optional[EmbeddingStore] = None,
        normalizer: Optional[VitalsNormalizer] = None,
        gateway: Optional["Gateway"] = None,
        endpoint: Optional["ModelEndpoint"] = None,
        rationale_cache: Optional["ResponseCache"] = None,
    ):
        self.train = train
        self.protocol = protocol
        self.opts = opts
        self.templates = templates or load_templates()
        self.text_store = text_store
        self.normalizer = normalizer
        self.gateway = gateway
        self.endpoint = endpoint
        self.rationale_cache = rationale_cache
        self._autocot_reps: dict[tuple[int, int], tuple[str, ...]] = {}
        self._stage1_rankings: dict[str, list[TriageRecord]] = {}
        self._labeled_train = Dataset(
            name=train.name, protocol=train.protocol, records=train.labeled()
        )

    def demos_for(self, strategy: StrategyConfig, record: TriageRecord) -> list[Demonstration]:
        kind = strategy.kind
        if kind in (
            StrategyKind.ZERO_SHOT_VANILLA,
            StrategyKind.ZERO_SHOT_COT,
            StrategyKind.FINE_TUNED_EXTERNAL,
        ):
            return []
        if kind in (StrategyKind.FEW_SHOT, StrategyKind.FEW_SHOT_COT):
            demos_records = self._random_records(strategy, record)
        elif kind in (StrategyKind.KATE, StrategyKind.KATE_COT):
            demos_records = self._kate_records(strategy, record)
        elif kind is StrategyKind.AUTO_COT:
            demos_records = self._autocot_records(strategy, record)
        else:
            raise PromptingError(f"unhandled strategy kind {kind}")

        with_rationales = strategy.is_cot
        demos = []
        for r in demos_records:
            rationale = self._rationale_for(r) if with_rationales else None
            demos.append(
                Demonstration(
                    input_text=serialize_record(r, self.opts),
                    answer=r.label,
                    rationale=rationale,
                )
            )
        return demos

    def _random_records(self, strategy: StrategyConfig, record: TriageRecord):
        return _stratified_random_records(
            self.train, strategy.shots, strategy.seed, frozenset({record.id})
        )

    def _kate_records(self, strategy: StrategyConfig, record: TriageRecord):
        if self.text_store is None or self.normalizer is None:
            raise PromptingError(f"{strategy.label()} requires a text embedding store")
        # The stage-1 text ranking is independent of the shot count, so it
        # is computed once per query and shared across shot sweeps.
        ranking = self._stage1_rankings.get(record.id)
        if ranking is None:
            ranking = text_similarity_ranking(record, self._labeled_train, self.text_store)
            self._stage1_rankings[record.id] = ranking
        pool_size = 3 * strategy.shots
        if pool_size > len(ranking):
            raise PoolTooSmallError(
                f"stage-1 pool of {pool_size} exceeds {len(ranking)} training records"
            )
        nearest_first = rerank_by_vitals(
            ranking[:pool_size], record, self.normalizer, strategy.shots
        )
        # Most similar example sits last, adjacent to the query.
        return list(reversed(nearest_first))

    def _autocot_records(self, strategy: StrategyConfig, record: TriageRecord):
        reps = self._autocot_representatives(strategy)
        out = []
        for rep_id in reps:
            if rep_id == record.id:
                rep_id = self._autocot_alternate(reps, record.id)
            out.append(self.train.by_id(rep_id))
        return out

    def _autocot_representatives(self, strategy: StrategyConfig) -> tuple[str, ...]:
        cache_key = (strategy.autocot_clusters, strategy.seed)
        if cache_key in self._autocot_reps:
            return self._autocot_reps[cache_key]
        if self.text_store is None:
            raise PromptingError("auto_cot requires a text embedding store")
        labeled = self.train.labeled()
        if strategy.autocot_clusters > len(labeled):
            raise ShotsExceedTrainError(
                f"autocot_clusters={strategy.autocot_clusters} exceeds {len(labeled)} records"
            )
        vectors = np.stack([self.text_store.get(r.id) for r in labeled])
        assignment = _kmeans(
            vectors, strategy.autocot_clusters, sub_seed(strategy.seed, "autocot")
        )
        reps = []
        for j in range(strategy.autocot_clusters):
            member_idx = np.flatnonzero(assignment == j)
            if len(member_idx) == 0:
                continue
            centroid = vectors[member_idx].mean(axis=0)
            dists = ((vectors[member_idx] - centroid) ** 2).sum(axis=1)
            # Ties break by id to keep the choice deterministic.
            best = min(
                zip(dists.tolist(), (labeled[i].id for i in member_idx)),
                key=lambda pair: (pair[0], pair[1]),
            )
            reps.append(best[1])
        result = tuple(reps)
        self._autocot_reps[cache_key] = result
        return result

    def _autocot_alternate(self, reps: tuple[str, ...], query_id: str) -> str:
        for r in self.train.labeled():
            if r.id != query_id and r.id not in reps:
                return r.id
        raise PromptingError("no alternate demonstration record available")

    def _rationale_for(self, record: TriageRecord) -> str:
        """Gateway-generated reasoning for a demonstration record.

        Generated once per (record, endpoint, prompt) and cached; the
        trailing acuity line is stripped because the demonstration always
        answers with the gold label.
        """
        if self.gateway is None or self.endpoint is None:
            raise PromptingError("rationale generation requires a gateway and endpoint")
        probe = StrategyConfig(kind=StrategyKind.ZERO_SHOT_COT)
        bundle = build_prompt(probe, record, [], self.protocol, self.opts, self.templates)
        key = stable_hash(
            "|".join((record.id, self.endpoint.identity(), stable_hash(bundle.query_text)))
        )
        if self.rationale_cache is not None:
            cached = self.rationale_cache.get(key)
            if cached is not None:
                return cached
        result = self.gateway.complete(self.endpoint, bundle)
        rationale = _strip_answer_line(result.raw_text)
        if self.rationale_cache is not None:
            self.rationale_cache.put(key, rationale)
        return rationale


def select_demos_autocot(
    train: Dataset,
    text_store: EmbeddingStore,
    clusters: int,
    gateway: "Gateway",
    endpoint: "ModelEndpoint",
    protocol: Protocol,
    opts: SerializationOptions,
    seed: int = 0,
    rationale_cache: Optional["ResponseCache"] = None,
) -> list[Demonstration]:
    """Cluster the training pool and demonstrate one record per cluster."""
    builder = DemoBuilder(
        train,
        protocol,
        opts,
        text_store=text_store,
        gateway=gateway,
        endpoint=endpoint,
        rationale_cache=rationale_cache,
    )
    strategy = StrategyConfig(kind=StrategyKind.AUTO_COT, seed=seed, autocot_clusters=clusters)
    sentinel = TriageRecord(id="__query__", chief_complaint="query placeholder")
    return builder.demos_for(strategy, sentinel)
