"""Protocol runners, metrics, and report emission.

A protocol run streams corrupted batches through an adapter in order, with
no resets between corruptions, and records per-segment error percentages.
The ``forgetting`` protocol additionally scores the clean source test split
before and after the stream; ``generalization`` freezes adaptation for the
second half of the corruptions and scores them with batch statistics.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, replace

import numpy as np

from .adapters import TTAClassifier
from .config import RunConfig
from .errors import ConfigError
from .stream import SourceData, StreamSchedule, build_schedule, generate_source, iter_stream


@dataclass
class BatchRecord:
    segment_index: int
    n: int
    n_errors: int
    adapted: bool


@dataclass
class SegmentResult:
    corruption: str
    severity: int
    adapted: bool
    n: int
    n_errors: int

    @property
    def error_pct(self) -> float:
        return 100.0 * self.n_errors / self.n


@dataclass
class RunReport:
    protocol: str
    policy: str
    seed: int
    batch_size: int
    segments: list[SegmentResult]
    batch_log: list[BatchRecord]
    trainable_param_count: int
    source_error_before_pct: float | None = None
    source_error_after_pct: float | None = None
    seconds_per_batch: float = 0.0

    @property
    def mean_error_pct(self) -> float:
        total = sum(s.n for s in self.segments)
        wrong = sum(s.n_errors for s in self.segments)
        return 100.0 * wrong / total

    @property
    def forgetting_delta_pct(self) -> float | None:
        if self.source_error_before_pct is None or self.source_error_after_pct is None:
            return None
        return self.source_error_after_pct - self.source_error_before_pct

    def frozen_mean_error_pct(self) -> float | None:
        """Mean error over frozen-evaluation segments (generalization rows)."""
        frozen = [s for s in self.segments if not s.adapted]
        if not frozen:
            return None
        return 100.0 * sum(s.n_errors for s in frozen) / sum(s.n for s in frozen)


def _error_count(predictions: np.ndarray, labels: np.ndarray) -> int:
    return int(np.sum(predictions != labels))


def _batched_error_pct(predict, X: np.ndarray, y: np.ndarray, batch_size: int) -> float:
    wrong = 0
    for start in range(0, X.shape[0], batch_size):
        stop = min(start + batch_size, X.shape[0])
        if X.shape[0] - stop == 1:
            stop = X.shape[0]
        wrong += _error_count(predict(X[start:stop]), y[start:stop])
    return 100.0 * wrong / X.shape[0]


def schedule_for(config: RunConfig) -> StreamSchedule:
    mode = "abrupt" if config.protocol == "forgetting" else config.protocol
    return build_schedule(
        mode,
        tuple(config.corruptions),
        config.batch_size,
        config.seed,
        samples_per_corruption=config.samples_per_corruption,
        samples_per_severity_step=config.samples_per_severity_step,
    )


def run_protocol(
    config: RunConfig,
    adapter: TTAClassifier | None = None,
    source_data: SourceData | None = None,
) -> RunReport:
    """Execute one continual run and aggregate its metrics.

    ``adapter`` and ``source_data`` may be supplied to share a trained
    source model across runs; both are derived from the config's seed when
    omitted, so a given (config, seed) pair always produces the same report
    apart from wall-clock timing.
    """
    config.validate()
    if source_data is None:
        source_data = generate_source(config.task(), config.seed)
    if adapter is None:
        adapter = TTAClassifier(**config.classifier_kwargs())
    if not hasattr(adapter, "model_"):
        adapter.fit(source_data.train_x, source_data.train_y)
    adapter.reset()

    source_before = None
    if config.protocol == "forgetting":
        source_before = _batched_error_pct(
            lambda x: adapter.classes_[
                np.argmax(adapter.snapshot_.predict_proba(x, bn_mode="running").data, axis=1)
            ],
            source_data.test_x,
            source_data.test_y,
            config.batch_size,
        )

    schedule = schedule_for(config)
    tallies: dict[int, list[int]] = {i: [0, 0] for i in range(len(schedule.segments))}
    batch_log: list[BatchRecord] = []
    n_batches = 0
    started = time.perf_counter()
    for seg_idx, segment, batch_x, batch_y in iter_stream(schedule, source_data):
        if segment.adapt:
            preds = adapter.adapt(batch_x)
        else:
            preds = adapter.predict(batch_x)
        wrong = _error_count(preds, batch_y)
        tallies[seg_idx][0] += batch_x.shape[0]
        tallies[seg_idx][1] += wrong
        batch_log.append(BatchRecord(seg_idx, batch_x.shape[0], wrong, segment.adapt))
        n_batches += 1
    elapsed = time.perf_counter() - started

    segments = [
        SegmentResult(
            corruption=segment.corruption,
            severity=segment.severity,
            adapted=segment.adapt,
            n=tallies[i][0],
            n_errors=tallies[i][1],
        )
        for i, segment in enumerate(schedule.segments)
    ]
    report = RunReport(
        protocol=config.protocol,
        policy=config.policy,
        seed=config.seed,
        batch_size=config.batch_size,
        segments=segments,
        batch_log=batch_log,
        trainable_param_count=adapter.n_adaptation_params(),
        seconds_per_batch=elapsed / max(n_batches, 1),
    )
    if config.protocol == "forgetting":
        report.source_error_before_pct = source_before
        report.source_error_after_pct = _batched_error_pct(
            adapter.predict, source_data.test_x, source_data.test_y, config.batch_size
        )
    return report


CSV_COLUMNS = ("protocol", "policy", "segment", "corruption", "severity", "n", "error_pct")


def report_rows(report: RunReport) -> list[dict]:
    return [
        {
            "protocol": report.protocol,
            "policy": report.policy,
            "segment": i,
            "corruption": seg.corruption,
            "severity": seg.severity,
            "n": seg.n,
            "error_pct": seg.error_pct,
        }
        for i, seg in enumerate(report.segments)
    ]


def render_csv(reports: list[RunReport] | RunReport) -> str:
    if isinstance(reports, RunReport):
        reports = [reports]
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for report in reports:
        for row in report_rows(report):
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in CSV_COLUMNS])
    return buffer.getvalue()


def report_dict(report: RunReport) -> dict:
    return {
        "protocol": report.protocol,
        "policy": report.policy,
        "seed": report.seed,
        "batch_size": report.batch_size,
        "segments": report_rows(report),
        "mean_error_pct": report.mean_error_pct,
        "source_error_before_pct": report.source_error_before_pct,
        "source_error_after_pct": report.source_error_after_pct,
        "forgetting_delta_pct": report.forgetting_delta_pct,
        "frozen_mean_error_pct": report.frozen_mean_error_pct(),
        "trainable_param_count": report.trainable_param_count,
        "seconds_per_batch": report.seconds_per_batch,
    }


def emit_report(reports: list[RunReport] | RunReport, path, fmt: str = "csv") -> None:
    """Write reports to ``path``; CSV carries only the deterministic columns."""
    if isinstance(reports, RunReport):
        reports = [reports]
    if fmt == "csv":
        payload = render_csv(reports)
    elif fmt == "json":
        payload = json.dumps([report_dict(r) for r in reports], indent=2) + "\n"
    else:
        raise ConfigError(f"unknown report format {fmt!r} (expected 'csv' or 'json')")
    with open(path, "w") as fh:
        fh.write(payload)


def aggregate_csv(paths) -> list[dict]:
    """Combine per-segment CSVs into per-(protocol, policy) weighted means."""
    groups: dict[tuple[str, str], list[float]] = {}
    for path in paths:
        with open(path) as fh:
            for row in csv.DictReader(fh):
                key = (row["protocol"], row["policy"])
                bucket = groups.setdefault(key, [0.0, 0.0])
                n = float(row["n"])
                bucket[0] += n
                bucket[1] += n * float(row["error_pct"])
    return [
        {"protocol": proto, "policy": policy, "n": int(total), "mean_error_pct": weighted / total}
        for (proto, policy), (total, weighted) in sorted(groups.items())
    ]


def run_sweep(
    config: RunConfig,
    batch_sizes: tuple[int, ...],
    seeds: tuple[int, ...],
    policies: tuple[str, ...] | None = None,
) -> list[RunReport]:
    """Run the config across batch sizes, seeds, and policies.

    Within one seed, every policy and batch size shares the same trained
    source model and the same underlying sample stream.
    """
    policies = policies or (config.policy,)
    reports = []
    for seed in seeds:
        base = replace(config, seed=seed)
        source_data = generate_source(base.task(), seed)
        for policy in policies:
            adapter = TTAClassifier(**replace(base, policy=policy).classifier_kwargs())
            adapter.fit(source_data.train_x, source_data.train_y)
            for batch_size in batch_sizes:
                run_cfg = replace(base, policy=policy, batch_size=batch_size)
                reports.append(run_protocol(run_cfg, adapter=adapter, source_data=source_data))
    return reports
