"""Synthetic source task and corruption streams for continual evaluation.

The source task is a mixture of well-separated Gaussian class clusters.
Corruptions transform feature vectors with a per-kind intensity that grows
geometrically over severities 1..5 (factors 0.25, 0.5, 1, 2, 4 of a per-kind
base); severity 0 is the identity. Schedules order (corruption, severity)
segments into the abrupt, gradual, or generalization-split protocols, and a
stream is replayable bit-exactly from its seed and configuration.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ConfigError, GenerationError, ShapeError

CORRUPTION_KINDS = (
    "additive_gaussian",
    "scale_drift",
    "plane_rotation",
    "feature_dropout",
    "contrast_compress",
    "shift_bias",
    "heavy_tail_noise",
    "permute_subset",
)

# Severity 1..5 multiplies the per-kind base intensity by these factors.
SEVERITY_FACTORS = {0: 0.0, 1: 0.25, 2: 0.5, 3: 1.0, 4: 2.0, 5: 4.0}

# Per-kind base intensity (the severity-3 value). Units depend on the kind:
#   additive_gaussian  noise standard deviation
#   scale_drift        half-range of per-feature log-scale factors
#   plane_rotation     rotation angle in radians
#   feature_dropout    fraction of features zeroed (capped at 0.9)
#   contrast_compress  log shrink factor toward the per-feature batch mean
#   shift_bias         norm of the added offset vector
#   heavy_tail_noise   scale of Student-t(3) noise
#   permute_subset     fraction of features permuted (capped at 0.9)
CORRUPTION_BASES = {
    "additive_gaussian": 0.8,
    "scale_drift": 0.5,
    "plane_rotation": float(np.pi / 10.0),
    "feature_dropout": 0.1,
    "contrast_compress": 0.35,
    "shift_bias": 1.0,
    "heavy_tail_noise": 0.4,
    "permute_subset": 0.08,
}

GRADUAL_RAMP = (1, 2, 3, 4, 5, 4, 3, 2, 1)


@dataclass(frozen=True)
class SourceTask:
    """Configuration of the synthetic labeled source domain."""

    input_dim: int = 32
    n_classes: int = 10
    sigma: float = 1.0
    mean_scale: float = 1.0
    min_separation_sigmas: float = 4.0
    n_train: int = 4000
    n_test: int = 2000
    max_probe_error_pct: float = 5.0


@dataclass
class SourceData:
    """A realized source task: labeled splits plus the true class means."""

    task: SourceTask
    class_means: np.ndarray
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray


def nearest_centroid_error_pct(
    train_x: np.ndarray,
    train_y: np.ndarray,
    test_x: np.ndarray,
    test_y: np.ndarray,
    n_classes: int,
) -> float:
    """Error of the nearest class-centroid rule, in percent."""
    centroids = np.stack([train_x[train_y == c].mean(axis=0) for c in range(n_classes)])
    d2 = ((test_x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    preds = np.argmin(d2, axis=1)
    return 100.0 * float(np.mean(preds != test_y))


def _balanced_labels(n: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    reps = -(-n // n_classes)
    labels = np.tile(np.arange(n_classes), reps)[:n]
    return labels[rng.permutation(n)]


def generate_source(task: SourceTask, seed: int) -> SourceData:
    """Draw class means and labeled train/test splits, deterministically.

    Class means are resampled until all pairwise distances reach
    ``min_separation_sigmas * sigma``; generation then verifies that a
    nearest-centroid probe stays under ``max_probe_error_pct`` on the test
    split.
    """
    mean_rng, train_rng, test_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)
    )
    min_dist = task.min_separation_sigmas * task.sigma
    means = None
    for _ in range(64):
        candidate = mean_rng.normal(0.0, task.mean_scale, size=(task.n_classes, task.input_dim))
        diffs = candidate[:, None, :] - candidate[None, :, :]
        dist = np.sqrt((diffs**2).sum(axis=2))
        np.fill_diagonal(dist, np.inf)
        if dist.min() >= min_dist:
            means = candidate
            break
    if means is None:
        raise GenerationError(
            f"could not place {task.n_classes} class means at pairwise distance "
            f">= {min_dist}; increase mean_scale"
        )

    def draw(n, rng):
        y = _balanced_labels(n, task.n_classes, rng)
        x = means[y] + task.sigma * rng.normal(size=(n, task.input_dim))
        return x, y

    train_x, train_y = draw(task.n_train, train_rng)
    test_x, test_y = draw(task.n_test, test_rng)
    probe = nearest_centroid_error_pct(train_x, train_y, test_x, test_y, task.n_classes)
    if probe > task.max_probe_error_pct:
        raise GenerationError(
            f"probe error {probe:.2f}% exceeds {task.max_probe_error_pct}%; "
            "increase mean spacing (mean_scale or min_separation_sigmas)"
        )
    return SourceData(task, means, train_x, train_y, test_x, test_y)


def corruption_intensity(kind: str, severity: int, bases: dict[str, float] | None = None) -> float:
    if kind not in CORRUPTION_KINDS:
        raise ConfigError(f"unknown corruption kind {kind!r}")
    if severity not in SEVERITY_FACTORS:
        raise ConfigError(f"severity must be in 0..5, got {severity}")
    base = (bases or CORRUPTION_BASES)[kind]
    return base * SEVERITY_FACTORS[severity]


def corrupt(x: np.ndarray, kind: str, severity: int, seed, bases: dict[str, float] | None = None) -> np.ndarray:
    """Apply one corruption at the given severity. Severity 0 is the identity.

    ``seed`` fixes both the corruption's instance parameters (drift vector,
    rotation plane, masks, ...) and any per-sample noise, so a segment
    corrupted in one call is reproducible bit-exactly.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"corrupt expects a (n, dim) block, got {x.shape}")
    intensity = corruption_intensity(kind, severity, bases)
    if severity == 0:
        return x.copy()
    rng = np.random.default_rng(seed)
    n, dim = x.shape

    if kind == "additive_gaussian":
        return x + rng.normal(0.0, intensity, size=x.shape)
    if kind == "scale_drift":
        factors = np.exp(rng.uniform(-intensity, intensity, size=dim))
        return x * factors
    if kind == "plane_rotation":
        u = rng.normal(size=dim)
        u /= np.linalg.norm(u)
        v = rng.normal(size=dim)
        v -= u * (u @ v)
        v /= np.linalg.norm(v)
        xu = x @ u
        xv = x @ v
        cos_t, sin_t = np.cos(intensity), np.sin(intensity)
        return (
            x
            + np.outer(xu * (cos_t - 1.0) - xv * sin_t, u)
            + np.outer(xu * sin_t + xv * (cos_t - 1.0), v)
        )
    if kind == "feature_dropout":
        k = int(round(dim * min(intensity, 0.9)))
        out = x.copy()
        if k:
            out[:, rng.choice(dim, size=k, replace=False)] = 0.0
        return out
    if kind == "contrast_compress":
        center = x.mean(axis=0)
        return center + np.exp(-intensity) * (x - center)
    if kind == "shift_bias":
        direction = rng.normal(size=dim)
        direction /= np.linalg.norm(direction)
        return x + intensity * direction
    if kind == "heavy_tail_noise":
        return x + intensity * rng.standard_t(df=3, size=x.shape)
    if kind == "permute_subset":
        k = int(round(dim * min(intensity, 0.9)))
        out = x.copy()
        if k >= 2:
            idx = rng.choice(dim, size=k, replace=False)
            out[:, idx] = out[:, idx[rng.permutation(k)]]
        return out
    raise ConfigError(f"unknown corruption kind {kind!r}")  # pragma: no cover


@dataclass(frozen=True)
class Segment:
    """One homogeneous stretch of the stream."""

    corruption: str
    severity: int
    n_samples: int
    batch_size: int
    adapt: bool = True

    @property
    def n_batches(self) -> int:
        return -(-self.n_samples // self.batch_size)


@dataclass(frozen=True)
class StreamSchedule:
    mode: str
    seed: int
    segments: tuple[Segment, ...]
    bases: tuple[tuple[str, float], ...] = tuple(sorted(CORRUPTION_BASES.items()))

    @property
    def total_samples(self) -> int:
        return sum(seg.n_samples for seg in self.segments)


def build_schedule(
    mode: str,
    corruptions: tuple[str, ...],
    batch_size: int,
    seed: int,
    samples_per_corruption: int = 2000,
    samples_per_severity_step: int = 200,
    bases: dict[str, float] | None = None,
) -> StreamSchedule:
    """Order corruption segments into one of the evaluation protocols.

    - ``abrupt``: each corruption once, severity 5.
    - ``gradual``: per corruption, the severity ramp 1,2,3,4,5,4,3,2,1.
    - ``generalization``: severity-5 segments where only the first half
      (rounded up) of the corruptions are adapted on; the rest are scored
      with frozen parameters.
    """
    if batch_size < 2:
        raise ConfigError(f"batch_size must be >= 2 for batch statistics, got {batch_size}")
    if not corruptions:
        raise ConfigError("need at least one corruption")
    unknown = [c for c in corruptions if c not in CORRUPTION_KINDS]
    if unknown:
        raise ConfigError(f"unknown corruption kinds: {unknown}")
    segments: list[Segment] = []
    if mode == "abrupt":
        for kind in corruptions:
            segments.append(Segment(kind, 5, samples_per_corruption, batch_size))
    elif mode == "gradual":
        for kind in corruptions:
            for severity in GRADUAL_RAMP:
                segments.append(Segment(kind, severity, samples_per_severity_step, batch_size))
    elif mode == "generalization":
        n_adapt = -(-len(corruptions) // 2)
        for i, kind in enumerate(corruptions):
            segments.append(
                Segment(kind, 5, samples_per_corruption, batch_size, adapt=i < n_adapt)
            )
    else:
        raise ConfigError(f"unknown schedule mode {mode!r}")
    base_items = tuple(sorted((bases or CORRUPTION_BASES).items()))
    return StreamSchedule(mode=mode, seed=seed, segments=tuple(segments), bases=base_items)


def segment_block(
    schedule: StreamSchedule, segment_index: int, data: SourceData
) -> tuple[np.ndarray, np.ndarray]:
    """Materialize one segment's corrupted samples and true labels."""
    segment = schedule.segments[segment_index]
    ss = np.random.SeedSequence(entropy=schedule.seed, spawn_key=(segment_index,))
    data_seq, corrupt_seq = ss.spawn(2)
    rng = np.random.default_rng(data_seq)
    task = data.task
    y = rng.integers(0, task.n_classes, size=segment.n_samples)
    clean = data.class_means[y] + task.sigma * rng.normal(
        size=(segment.n_samples, task.input_dim)
    )
    corrupted = corrupt(
        clean, segment.corruption, segment.severity, corrupt_seq, bases=dict(schedule.bases)
    )
    return corrupted, y


def iter_stream(
    schedule: StreamSchedule, data: SourceData
) -> Iterator[tuple[int, Segment, np.ndarray, np.ndarray]]:
    """Yield ``(segment_index, segment, batch_x, batch_y)`` in stream order.

    Samples are generated per segment and chunked, so the sample sequence is
    identical across batch sizes; the final chunk of a segment may be short.
    """
    for idx, segment in enumerate(schedule.segments):
        block_x, block_y = segment_block(schedule, idx, data)
        for start in range(0, segment.n_samples, segment.batch_size):
            stop = min(start + segment.batch_size, segment.n_samples)
            yield idx, segment, block_x[start:stop], block_y[start:stop]


def export_stream(path, schedule: StreamSchedule, data: SourceData) -> None:
    """Write the whole stream as columnar text: header ``dim count``, then
    one ``label feature...`` row per sample."""
    with open(path, "w") as fh:
        fh.write(f"{data.task.input_dim} {schedule.total_samples}\n")
        for _, _, batch_x, batch_y in iter_stream(schedule, data):
            for label, row in zip(batch_y, batch_x):
                fh.write(f"{int(label)} " + " ".join(repr(v) for v in row) + "\n")
