"""Experiment orchestration: data prep, strategy runs, reports, manifests.

Commands validate the whole config before any model call, run strategies
sequentially (only gateway calls within a strategy are concurrent), and
emit JSON reports, text tables, CSV plot data, rendered figures, and a
manifest listing every output file with its content hash. Reruns with the
same config and warm caches produce byte-identical outputs.
"""
from __future__ import annotations

import csv
import dataclasses
import datetime
import json
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .config import ExperimentConfig, require_valid
from .counterfactual import (
    AuditTests,
    GroupMeans,
    audit_tests,
    group_means,
    render_audit_table,
    run_audit,
)
from .dataset import (
    Dataset,
    Protocol,
    SplitSpec,
    generate_synthetic_dataset,
    load_dataset,
    temporal_stratified_split,
)
from .figures import render_audit_heatmap, render_level_distribution, render_shots_sweep
from .gateway import Gateway, ModelEndpoint, ResponseCache
from .metrics import MetricReport, PredictionSet, render_metric_table, score
from .prompting import (
    DemoBuilder,
    StrategyConfig,
    build_prompt,
    load_templates,
)
from .retrieval import EmbeddingStore, VitalsNormalizer, fit_normalizer
from .serialize import SerializationOptions, serialize_record
from .util import file_sha256, stable_hash, stable_json, sub_seed


def _file_label(strategy: StrategyConfig) -> str:
    return strategy.label().replace("[", "-").replace("]", "")


class Runner:
    """Executes the CLI commands for one validated experiment config."""

    def __init__(self, config: ExperimentConfig, findings: Optional[list] = None):
        self.config = require_valid(config, findings or [])
        self.out_dir = Path(config.output_dir)
        cache_dir = Path(config.cache_dir) if config.cache_dir else self.out_dir / "cache"
        self.gateway = Gateway(cache_dir=cache_dir)
        self.templates = load_templates(config.templates_path)
        self.rationale_cache = ResponseCache(cache_dir / "rationales.jsonl", "rationale")
        self._text_store: Optional[EmbeddingStore] = None

    # -- data -------------------------------------------------------------

    def load_data(self) -> tuple[Dataset, Optional[Dataset], Optional[Dataset]]:
        """Full dataset plus the train/test splits when configured."""
        cfg = self.config
        if cfg.dataset.source == "synthetic":
            full = generate_synthetic_dataset(
                n=cfg.dataset.n,
                seed=sub_seed(cfg.seed, "dataset"),
                protocol=cfg.protocol,
                missingness=cfg.dataset.missingness,
            )
        else:
            result = load_dataset(
                cfg.dataset.path,
                protocol=cfg.protocol,
                schema_map=dict(cfg.dataset.schema_map),
                delimiter=cfg.dataset.delimiter,
            )
            full = result.dataset

        if cfg.train_path and cfg.test_path:
            train = load_dataset(cfg.train_path, protocol=cfg.protocol).dataset
            test = load_dataset(cfg.test_path, protocol=cfg.protocol).dataset
            return full, train, test
        if cfg.split is not None:
            train, test = temporal_stratified_split(full, cfg.split)
            return full, train, test
        return full, None, None

    # -- retrieval assets ---------------------------------------------------

    def _embedding_endpoint(self) -> ModelEndpoint:
        cfg = self.config
        endpoint = cfg.endpoint(cfg.embeddings.endpoint)
        if endpoint.is_mock and "embedding_dim" not in dict(endpoint.extra_params):
            endpoint = dataclasses.replace(
                endpoint,
                extra_params=endpoint.extra_params
                + (("embedding_dim", cfg.embeddings.dim),),
            )
        return endpoint

    def _embedding_text(self, record) -> str:
        if self.config.embeddings.text_source == "full_record":
            neutral = dataclasses.replace(
                self.config.serialization, include_demographics=False
            )
            return serialize_record(record, neutral)
        return record.chief_complaint

    def text_store_for(self, datasets: Sequence[Dataset]) -> EmbeddingStore:
        """Text embeddings for every record in the datasets.

        The embedded text is the chief complaint by default (configurable
        to the full serialized record). Loads the configured store file
        when present, fetches any missing vectors through the embeddings
        endpoint, and writes the store back so later runs start warm.
        """
        store_path = self.config.embeddings.store_path
        store: Optional[EmbeddingStore] = None
        if store_path and Path(store_path).exists():
            store = EmbeddingStore.load(store_path)

        needed: dict[str, str] = {}
        for dataset in datasets:
            for record in dataset:
                if store is None or record.id not in store:
                    needed.setdefault(record.id, self._embedding_text(record))

        if needed:
            endpoint = self._embedding_endpoint()
            ids = sorted(needed)
            vectors = self.gateway.embed(endpoint, [needed[i] for i in ids])
            if store is None:
                store = EmbeddingStore(dimension=len(vectors[0]))
            for record_id, vector in zip(ids, vectors):
                store.add(record_id, vector)
            if store_path:
                store.save(store_path)
        if store is None:
            raise ValueError("no records require embeddings and no store file exists")
        return store

    def demo_builder(
        self,
        train: Dataset,
        opts: SerializationOptions,
        endpoint: ModelEndpoint,
        text_store: Optional[EmbeddingStore],
        normalizer: Optional[VitalsNormalizer],
    ) -> DemoBuilder:
        return DemoBuilder(
            train,
            self.config.protocol,
            opts,
            templates=self.templates,
            text_store=text_store,
            normalizer=normalizer,
            gateway=self.gateway,
            endpoint=endpoint,
            rationale_cache=self.rationale_cache,
        )

    # -- commands -----------------------------------------------------------

    def evaluate(self) -> Path:
        """Score every configured strategy on the test set."""
        cfg = self.config
        full, train, test = self.load_data()
        if test is None:
            raise ValueError("evaluate requires a split spec or explicit train/test paths")
        train_pool = train if train is not None else full

        needs_retrieval = any(s.uses_retrieval for s, _ in cfg.strategies)
        needs_rationales = any(
            s.is_cot and s.expected_demos() > 0 for s, _ in cfg.strategies
        )
        text_store = normalizer = None
        if needs_retrieval:
            text_store = self.text_store_for([train_pool, test])
            normalizer = fit_normalizer(train_pool)
        del needs_rationales  # rationale generation needs only the gateway

        reports: list[MetricReport] = []
        files: list[Path] = []
        exclusions: dict[str, int] = {}
        for strategy, endpoint_name in cfg.strategies:
            endpoint = cfg.endpoint(endpoint_name)
            report, predictions = self._run_strategy(
                strategy, endpoint, train_pool, test, text_store, normalizer
            )
            reports.append(report)
            exclusions[strategy.label()] = report.excluded_count

            label = _file_label(strategy)
            report_path = self.out_dir / "reports" / f"metrics_{label}.json"
            report_path.parent.mkdir(parents=True, exist_ok=True)
            report_path.write_text(report.to_json(), "utf-8")
            files.append(report_path)
            files.append(
                self._write_predictions_csv(
                    self.out_dir / "reports" / f"predictions_{label}.csv", test, predictions
                )
            )

        table_path = self.out_dir / "reports" / "metrics.txt"
        table_path.write_text(render_metric_table(reports), "utf-8")
        files.append(table_path)
        files.append(self._write_level_distribution_csv(reports))
        figure_path = self.out_dir / "figures" / "level_distribution.png"
        render_level_distribution(
            reports[0].gold_distribution,
            [(r.strategy, r.predicted_distribution) for r in reports],
            figure_path,
        )
        files.append(figure_path)

        return self._write_manifest("evaluate", files, {"exclusions": exclusions})

    def _run_strategy(
        self,
        strategy: StrategyConfig,
        endpoint: ModelEndpoint,
        train: Dataset,
        test: Dataset,
        text_store: Optional[EmbeddingStore],
        normalizer: Optional[VitalsNormalizer],
    ) -> tuple[MetricReport, list[Optional[int]]]:
        cfg = self.config
        builder = self.demo_builder(train, cfg.serialization, endpoint, text_store, normalizer)
        queries = [r for r in test if r.label is not None]
        bundles = [
            build_prompt(
                strategy, r, builder.demos_for(strategy, r), cfg.protocol,
                cfg.serialization, self.templates,
            )
            for r in queries
        ]
        completions = self.gateway.complete_batch(endpoint, bundles)
        predictions = [c.parsed for c in completions]
        pairs = tuple(
            (r.label, parsed)
            for r, parsed in zip(queries, predictions)
            if parsed is not None
        )
        excluded = sum(1 for parsed in predictions if parsed is None)
        report = score(
            PredictionSet(pairs=pairs, excluded_count=excluded), strategy=strategy.label()
        )
        return report, predictions

    def _write_predictions_csv(
        self, path: Path, test: Dataset, predictions: list[Optional[int]]
    ) -> Path:
        queries = [r for r in test if r.label is not None]
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["record_id", "gold", "predicted"])
            for record, parsed in zip(queries, predictions):
                writer.writerow([record.id, record.label, "" if parsed is None else parsed])
        return path

    def _write_level_distribution_csv(self, reports: Sequence[MetricReport]) -> Path:
        path = self.out_dir / "reports" / "level_distribution.csv"
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["strategy", "level", "gold_proportion", "predicted_proportion"])
            for report in reports:
                for level in range(1, 6):
                    writer.writerow(
                        [
                            report.strategy,
                            level,
                            f"{report.gold_distribution[level - 1]:.6f}",
                            f"{report.predicted_distribution[level - 1]:.6f}",
                        ]
                    )
        return path

    def audit(self) -> Path:
        """Run the 12-variant counterfactual audit for every strategy."""
        cfg = self.config
        if not cfg.audit.enabled:
            raise ValueError(
                "audit is not enabled; add an audit: section (or audit.enabled: true)"
            )
        full, train, test = self.load_data()
        base = test if test is not None else full
        records = base.records[: cfg.audit.max_records]
        audit_set = Dataset(name=f"{base.name}-audit", protocol=base.protocol, records=records)
        train_pool = train if train is not None else full

        neutral_opts = dataclasses.replace(cfg.serialization, include_demographics=False)
        needs_retrieval = any(s.uses_retrieval for s, _ in cfg.strategies)
        text_store = normalizer = None
        if needs_retrieval:
            text_store = self.text_store_for([train_pool, audit_set])
            normalizer = fit_normalizer(train_pool)

        files: list[Path] = []
        columns: list[tuple[str, GroupMeans, AuditTests, int]] = []
        cells_rows: list[list] = []
        for strategy, endpoint_name in cfg.strategies:
            endpoint = cfg.endpoint(endpoint_name)
            builder = None
            if strategy.expected_demos() > 0:
                builder = self.demo_builder(
                    train_pool, neutral_opts, endpoint, text_store, normalizer
                )
            matrix = run_audit(
                audit_set,
                strategy,
                endpoint,
                neutral_opts,
                self.gateway,
                demo_builder=builder,
                templates=self.templates,
                abort_threshold=cfg.audit.abort_threshold,
            )
            gm = group_means(matrix)
            tests = audit_tests(matrix)
            label = _file_label(strategy)
            columns.append((strategy.label(), gm, tests, cfg.audit.bonferroni_m))

            matrix_path = self.out_dir / "reports" / f"audit_matrix_{label}.json"
            matrix_path.parent.mkdir(parents=True, exist_ok=True)
            matrix.save(matrix_path)
            files.append(matrix_path)

            report_path = self.out_dir / "reports" / f"audit_{label}.json"
            report_path.write_text(
                json.dumps(
                    self._audit_report_dict(strategy, gm, tests), indent=2, sort_keys=True
                )
                + "\n",
                "utf-8",
            )
            files.append(report_path)

            figure_path = self.out_dir / "figures" / f"audit_heatmap_{label}.png"
            render_audit_heatmap(gm, strategy.label(), figure_path)
            files.append(figure_path)

            for sex, race, mean, n in gm.cell_means:
                cells_rows.append(
                    [strategy.label(), sex.value, race.value,
                     "" if mean is None else f"{mean:.6f}", n]
                )

        table_path = self.out_dir / "reports" / "audit.txt"
        table_path.write_text(render_audit_table(columns), "utf-8")
        files.append(table_path)

        cells_path = self.out_dir / "reports" / "audit_cells.csv"
        with open(cells_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["strategy", "sex", "race", "mean_acuity", "n"])
            writer.writerows(cells_rows)
        files.append(cells_path)

        return self._write_manifest("audit", files, {"bonferroni_m": cfg.audit.bonferroni_m})

    def _audit_report_dict(
        self, strategy: StrategyConfig, gm: GroupMeans, tests: AuditTests
    ) -> dict:
        from .stats import bonferroni

        m = self.config.audit.bonferroni_m
        corrected = {
            name: bonferroni(result.p_value, m)
            for name, result in (
                ("sex", tests.sex),
                ("race", tests.race),
                ("sex_race", tests.sex_race),
            )
        }
        return {
            "strategy": strategy.label(),
            "group_means": gm.to_dict(),
            "tests": tests.to_dict(),
            "bonferroni_m": m,
            "corrected_p": corrected,
        }

    def sweep_shots(self) -> Path:
        """Evaluate the shot-count sweep for every few-shot strategy."""
        cfg = self.config
        if not cfg.sweep_shots:
            raise ValueError("sweep-shots requires a sweep.shots list in the config")
        for strategy, _ in cfg.strategies:
            if not (strategy.kind.value in
                    ("few_shot", "few_shot_cot", "kate", "kate_cot")):
                raise ValueError(
                    f"sweep-shots supports few-shot/KATE strategies only, got {strategy.label()}"
                )

        full, train, test = self.load_data()
        if test is None:
            raise ValueError("sweep-shots requires a split spec or explicit train/test paths")
        train_pool = train if train is not None else full

        needs_retrieval = any(s.uses_retrieval for s, _ in cfg.strategies)
        text_store = normalizer = None
        if needs_retrieval:
            text_store = self.text_store_for([train_pool, test])
            normalizer = fit_normalizer(train_pool)

        rows = []
        queries = [r for r in test if r.label is not None]
        for strategy, endpoint_name in cfg.strategies:
            endpoint = cfg.endpoint(endpoint_name)
            # One builder per strategy family: the stage-1 retrieval
            # rankings inside it are shared across shot counts.
            builder = self.demo_builder(
                train_pool, cfg.serialization, endpoint, text_store, normalizer
            )
            for shots in cfg.sweep_shots:
                swept = dataclasses.replace(strategy, shots=shots)
                bundles = [
                    build_prompt(
                        swept, r, builder.demos_for(swept, r), cfg.protocol,
                        cfg.serialization, self.templates,
                    )
                    for r in queries
                ]
                completions = self.gateway.complete_batch(endpoint, bundles)
                pairs = tuple(
                    (r.label, c.parsed)
                    for r, c in zip(queries, completions)
                    if c.parsed is not None
                )
                excluded = sum(1 for c in completions if c.parsed is None)
                report = score(PredictionSet(pairs, excluded), strategy=strategy.kind.value)
                rows.append(report)

        files = []
        csv_path = self.out_dir / "reports" / "sweep_shots.csv"
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(
                ["strategy", "shots", "qwk", "mse", "macro_f1", "accuracy", "n", "excluded"]
            )
            i = 0
            for strategy, _ in cfg.strategies:
                for shots in cfg.sweep_shots:
                    r = rows[i]
                    writer.writerow(
                        [r.strategy, shots, f"{r.qwk:.6f}", f"{r.mse:.6f}",
                         f"{r.macro_f1:.6f}", f"{r.accuracy:.6f}", r.n, r.excluded_count]
                    )
                    i += 1
        files.append(csv_path)

        figure_path = self.out_dir / "figures" / "shots_sweep.png"
        sweep_points = []
        i = 0
        for strategy, _ in cfg.strategies:
            for shots in cfg.sweep_shots:
                r = rows[i]
                sweep_points.append((r.strategy, shots, r.qwk, r.accuracy))
                i += 1
        render_shots_sweep(sweep_points, figure_path)
        files.append(figure_path)

        return self._write_manifest("sweep-shots", files, {})

    def report(self) -> list[Path]:
        """Re-render text tables and figures from emitted JSON/CSV artifacts."""
        reports_dir = self.out_dir / "reports"
        written: list[Path] = []

        metric_files = sorted(reports_dir.glob("metrics_*.json"))
        if metric_files:
            reports = [_metric_report_from_json(p) for p in metric_files]
            table_path = reports_dir / "metrics.txt"
            table_path.write_text(render_metric_table(reports), "utf-8")
            written.append(table_path)
            figure_path = self.out_dir / "figures" / "level_distribution.png"
            render_level_distribution(
                reports[0].gold_distribution,
                [(r.strategy, r.predicted_distribution) for r in reports],
                figure_path,
            )
            written.append(figure_path)

        from .counterfactual import AuditMatrix

        matrix_files = sorted(reports_dir.glob("audit_matrix_*.json"))
        if matrix_files:
            columns = []
            for path in matrix_files:
                matrix = AuditMatrix.load(path)
                gm = group_means(matrix)
                tests = audit_tests(matrix)
                label = path.stem.removeprefix("audit_matrix_")
                columns.append((label, gm, tests, self.config.audit.bonferroni_m))
                figure_path = self.out_dir / "figures" / f"audit_heatmap_{label}.png"
                render_audit_heatmap(gm, label, figure_path)
                written.append(figure_path)
            table_path = reports_dir / "audit.txt"
            table_path.write_text(render_audit_table(columns), "utf-8")
            written.append(table_path)

        sweep_csv = reports_dir / "sweep_shots.csv"
        if sweep_csv.exists():
            with open(sweep_csv, "r", encoding="utf-8", newline="") as fh:
                reader = csv.DictReader(fh)
                points = [
                    (row["strategy"], int(row["shots"]), float(row["qwk"]),
                     float(row["accuracy"]))
                    for row in reader
                ]
            figure_path = self.out_dir / "figures" / "shots_sweep.png"
            render_shots_sweep(points, figure_path)
            written.append(figure_path)

        return written

    # -- manifest -----------------------------------------------------------

    def _write_manifest(self, command: str, files: Sequence[Path], extra: dict) -> Path:
        entries = sorted(
            {str(p.relative_to(self.out_dir)): file_sha256(p) for p in files}.items()
        )
        deterministic = {
            "command": command,
            "config_hash": self.config.config_hash(),
            "artifact_version": __version__,
            "files": [{"path": p, "sha256": h} for p, h in entries],
            **extra,
        }
        manifest = {
            **deterministic,
            "content_hash": stable_hash(stable_json(deterministic)),
            "created": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            "gateway": self.gateway.stats(),
        }
        path = self.out_dir / f"manifest_{command.replace('-', '_')}.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", "utf-8")
        return path


def _metric_report_from_json(path: Path) -> MetricReport:
    data = json.loads(path.read_text("utf-8"))
    return MetricReport(
        strategy=data["strategy"],
        qwk=data["qwk"],
        mse=data["mse"],
        macro_f1=data["macro_f1"],
        weighted_f1=data["weighted_f1"],
        accuracy=data["accuracy"],
        n=data["n"],
        excluded_count=data["excluded_count"],
        confusion=tuple(tuple(row) for row in data["confusion"]),
        gold_distribution=tuple(data["gold_distribution"]),
        predicted_distribution=tuple(data["predicted_distribution"]),
    )
