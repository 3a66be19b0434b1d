"""Irregular time-series ingestion, masking, normalization, and scoring.

Instances are immutable: masking produces a new instance plus the evaluation
mask of positions it hid, and values always keep the best-known ground truth
so hidden positions stay scoreable. All statistics are computed over observed
entries only and normalization is reversible through :class:`NormStats`.
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DataError, ParseError

__all__ = [
    "TimeSeriesInstance",
    "NormStats",
    "MaskSpec",
    "SynthFamilyConfig",
    "load_csv",
    "write_csv",
    "apply_masking",
    "mask_rng",
    "masked_instance_normalize",
    "denormalize",
    "synth_generate",
    "znorm_metrics",
    "DEFAULT_EPSILON",
]

DEFAULT_EPSILON = 1e-5

CSV_HEADER = ("series_id", "city", "timestamp", "value", "mask")


@dataclass(frozen=True)
class TimeSeriesInstance:
    """One irregularly sampled series with an observation mask (1 = observed)."""

    id: str
    city: str
    timestamps: np.ndarray
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        ts = np.ascontiguousarray(self.timestamps, dtype=np.float64)
        vals = np.ascontiguousarray(self.values, dtype=np.float64)
        msk = np.ascontiguousarray(self.mask, dtype=np.int8)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "mask", msk)
        if not (len(ts) == len(vals) == len(msk)):
            raise DataError(f"series {self.id}: field lengths differ")
        if len(ts) < 2:
            raise DataError(f"series {self.id}: needs at least 2 samples")
        if not np.all(np.diff(ts) > 0):
            raise DataError(f"series {self.id}: timestamps must be strictly increasing")
        if not np.isin(msk, (0, 1)).all():
            raise DataError(f"series {self.id}: mask entries must be 0 or 1")

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def n_observed(self) -> int:
        return int(self.mask.sum())

    def normalized_times(self) -> np.ndarray:
        """Timestamps rescaled to [0, 1] over this instance's span."""
        t = self.timestamps
        return (t - t[0]) / (t[-1] - t[0])

    def with_mask(self, mask: np.ndarray) -> "TimeSeriesInstance":
        return TimeSeriesInstance(self.id, self.city, self.timestamps, self.values, mask)


@dataclass(frozen=True)
class NormStats:
    """Masked per-instance statistics needed to undo normalization."""

    mean: float
    var: float
    epsilon: float

    def __post_init__(self):
        if self.var < 0.0:
            raise ContractError(f"variance must be >= 0, got {self.var}")
        if self.epsilon <= 0.0 and self.var == 0.0:
            raise ContractError("epsilon must be positive when variance is zero")

    @property
    def std(self) -> float:
        return float(np.sqrt(self.var + self.epsilon))


@dataclass(frozen=True)
class MaskSpec:
    """Seeded point-random masking at a fixed observation rate."""

    observation_rate: float
    seed: int = 0
    mode: str = "point-random"

    def __post_init__(self):
        if not 0.0 < self.observation_rate <= 1.0:
            raise ContractError(
                f"observation rate must lie in (0, 1], got {self.observation_rate}"
            )
        if self.mode != "point-random":
            raise ContractError(f"unsupported masking mode {self.mode!r}")


def load_csv(path) -> list[TimeSeriesInstance]:
    """Read `series_id,city,timestamp,value[,mask]` rows into instances.

    Rows may arrive in any order; they are grouped by series id and sorted by
    timestamp. A missing mask column means fully observed.
    """
    groups: dict[str, dict] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if tuple(header) not in (CSV_HEADER, CSV_HEADER[:4]):
            raise ParseError(
                f"{path}:1: expected header {','.join(CSV_HEADER[:4])}[,mask], "
                f"got {','.join(header)}"
            )
        has_mask = len(header) == 5
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} columns")
            sid, city = row[0], row[1]
            try:
                ts = float(row[2])
                value = float(row[3])
                m = int(row[4]) if has_mask else 1
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            if m not in (0, 1):
                raise ParseError(f"{path}:{lineno}: mask must be 0 or 1")
            g = groups.setdefault(sid, {"city": city, "rows": []})
            if g["city"] != city:
                raise DataError(f"{path}:{lineno}: series {sid} maps to two cities")
            g["rows"].append((ts, value, m))

    instances = []
    for sid in sorted(groups):
        g = groups[sid]
        rows = sorted(g["rows"], key=lambda r: r[0])
        ts = np.array([r[0] for r in rows])
        if len(ts) > 1 and not np.all(np.diff(ts) > 0):
            raise DataError(f"{path}: series {sid} has duplicate timestamps")
        instances.append(
            TimeSeriesInstance(
                id=sid,
                city=g["city"],
                timestamps=ts,
                values=np.array([r[1] for r in rows]),
                mask=np.array([r[2] for r in rows], dtype=np.int8),
            )
        )
    return instances


def write_csv(path, instances: list[TimeSeriesInstance]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for inst in instances:
            for t, v, m in zip(inst.timestamps, inst.values, inst.mask):
                writer.writerow([inst.id, inst.city, repr(float(t)), repr(float(v)), int(m)])


def mask_rng(seed: int, series_id: str, rate: float) -> np.random.Generator:
    """Deterministic generator for one (seed, series, rate) mask draw.

    Shared by training and evaluation so every consumer of a protocol sees
    the identical mask.
    """
    tag = zlib.crc32(series_id.encode("utf-8"))
    return np.random.default_rng(
        np.random.SeedSequence([int(seed), tag, int(round(rate * 10**9))])
    )


def apply_masking(
    inst: TimeSeriesInstance, spec: MaskSpec
) -> tuple[TimeSeriesInstance, np.ndarray]:
    """Hide observed entries down to the target rate.

    Exactly ``max(1, round(rate * T))`` entries stay observed, drawn uniformly
    without replacement from the currently observed ones. Returns the masked
    instance and the evaluation mask flagging the positions hidden here (the
    ground truth stays in ``values``).
    """
    n = len(inst)
    observed = np.flatnonzero(inst.mask == 1)
    n_keep = max(1, int(round(spec.observation_rate * n)))
    if n_keep > observed.size:
        raise ContractError(
            f"series {inst.id}: cannot keep {n_keep} of {observed.size} observed entries"
        )
    if n_keep == observed.size:
        return inst, np.zeros(n, dtype=np.int8)
    rng = mask_rng(spec.seed, inst.id, spec.observation_rate)
    keep = rng.choice(observed, size=n_keep, replace=False)
    new_mask = np.zeros(n, dtype=np.int8)
    new_mask[keep] = 1
    eval_mask = ((inst.mask == 1) & (new_mask == 0)).astype(np.int8)
    return inst.with_mask(new_mask), eval_mask


def masked_instance_normalize(
    inst: TimeSeriesInstance, epsilon: float = DEFAULT_EPSILON
) -> tuple[TimeSeriesInstance, NormStats]:
    """Standardize by statistics of the observed entries only.

    Mean and (population) variance come from observed positions; the affine
    map is applied to every entry so hidden coordinates share the scale.
    """
    observed = inst.mask == 1
    count = int(observed.sum())
    if count == 0:
        raise ContractError(f"series {inst.id}: no observed entries to normalize")
    obs = inst.values[observed]
    mean = float(obs.sum() / count)
    var = float(np.square(obs - mean).sum() / count)
    stats = NormStats(mean=mean, var=var, epsilon=epsilon)
    normalized = (inst.values - mean) / stats.std
    return (
        TimeSeriesInstance(inst.id, inst.city, inst.timestamps, normalized, inst.mask),
        stats,
    )


def denormalize(predictions: np.ndarray, stats: NormStats) -> np.ndarray:
    """Map model outputs back to the instance's original scale."""
    return stats.std * np.asarray(predictions, dtype=np.float64) + stats.mean


@dataclass(frozen=True)
class SynthFamilyConfig:
    """Deterministic family of heterogeneous sinusoid-mixture cities.

    Each city owns a shared frequency pool, a sampling-interval pattern, and
    a series length; each series perturbs the pool and draws its own
    amplitudes, phases, trend, offset, and scale. Everything is keyed by
    (seed, city index, series index), so a given series is reproducible
    independently of how many siblings are generated.
    """

    n_cities: int = 6
    series_per_city: int = 8
    length_range: tuple[int, int] = (190, 210)
    frequency_count_range: tuple[int, int] = (2, 3)
    frequency_range: tuple[float, float] = (1.0, 6.0)
    frequency_jitter: float = 0.03
    amplitude_range: tuple[float, float] = (0.6, 1.4)
    phase_range: tuple[float, float] = (0.0, 6.283185307179586)
    trend_range: tuple[float, float] = (-0.5, 0.5)
    noise_std: float = 0.02
    offset_range: tuple[float, float] = (-3.0, 3.0)
    scale_range: tuple[float, float] = (0.5, 2.5)
    interval_jitter: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.n_cities < 1 or self.series_per_city < 1:
            raise ContractError("city and series counts must be positive")
        for name in ("length_range", "frequency_count_range"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 1:
                raise ContractError(f"{name} must be a non-empty positive range")
        if self.noise_std < 0:
            raise ContractError("noise std must be >= 0")
        if not 0.0 <= self.interval_jitter < 1.0:
            raise ContractError("interval jitter must lie in [0, 1)")


def _draw(rng: np.random.Generator, bounds: tuple[float, float]) -> float:
    lo, hi = bounds
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def _synth_series(
    cfg: SynthFamilyConfig, city_idx: int, series_idx: int, city_freqs, n_time, dt_base
) -> TimeSeriesInstance:
    rng = np.random.default_rng(
        np.random.SeedSequence([cfg.seed, 1 + city_idx, series_idx])
    )
    steps = dt_base * (1.0 + cfg.interval_jitter * rng.uniform(-1.0, 1.0, size=n_time - 1))
    timestamps = np.concatenate([[0.0], np.cumsum(steps)])
    t_hat = timestamps / timestamps[-1]

    signal = np.zeros(n_time)
    for f in city_freqs:
        freq = f * (1.0 + cfg.frequency_jitter * rng.uniform(-1.0, 1.0))
        amp = _draw(rng, cfg.amplitude_range)
        phase = _draw(rng, cfg.phase_range)
        signal += amp * np.sin(2.0 * np.pi * freq * t_hat + phase)
    signal += _draw(rng, cfg.trend_range) * t_hat
    values = _draw(rng, cfg.offset_range) + _draw(rng, cfg.scale_range) * signal
    if cfg.noise_std > 0:
        values = values + rng.normal(0.0, cfg.noise_std, size=n_time)
    return TimeSeriesInstance(
        id=f"c{city_idx:02d}s{series_idx:02d}",
        city=f"city{city_idx:02d}",
        timestamps=timestamps,
        values=values,
        mask=np.ones(n_time, dtype=np.int8),
    )


def synth_generate(cfg: SynthFamilyConfig) -> list[TimeSeriesInstance]:
    """Generate ``n_cities * series_per_city`` fully observed instances."""
    instances = []
    for city_idx in range(cfg.n_cities):
        city_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0, city_idx]))
        n_time = int(city_rng.integers(cfg.length_range[0], cfg.length_range[1] + 1))
        n_freq = int(
            city_rng.integers(
                cfg.frequency_count_range[0], cfg.frequency_count_range[1] + 1
            )
        )
        city_freqs = city_rng.uniform(*cfg.frequency_range, size=n_freq)
        dt_base = float(city_rng.uniform(0.5, 2.0))
        for series_idx in range(cfg.series_per_city):
            instances.append(
                _synth_series(cfg, city_idx, series_idx, city_freqs, n_time, dt_base)
            )
    return instances


def znorm_metrics(
    predicted: np.ndarray, truth: np.ndarray, eval_mask: np.ndarray
) -> tuple[float, float]:
    """MAE and MSE over the evaluation positions after z-normalizing both
    series with the ground truth's own statistics."""
    predicted = np.asarray(predicted, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    sel = np.asarray(eval_mask).astype(bool)
    if predicted.shape != truth.shape or sel.shape != truth.shape:
        raise ContractError("prediction, truth, and eval mask must share a shape")
    if not sel.any():
        raise ContractError("evaluation mask selects no positions")
    mean = float(truth.mean())
    std = float(truth.std())
    if std == 0.0:
        std = 1.0
    diff = (predicted[sel] - mean) / std - (truth[sel] - mean) / std
    return float(np.abs(diff).mean()), float(np.square(diff).mean())
