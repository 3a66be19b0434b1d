"""Benchmark harness: masking protocols, baselines, reports, exports.

Every method in a protocol run sees the identical seeded mask for a given
(seed, series, rate) triple, and is scored with z-normalized MAE/MSE only at
the positions that masking hid. Two internal baselines (observed mean,
piecewise-linear interpolation in timestamp) anchor the comparisons.
"""

from __future__ import annotations

import time
import xml.sax.saxutils as saxutils
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import MaskSpec, TimeSeriesInstance, apply_masking, znorm_metrics
from .errors import ConfigError, ContractError
from .trainer import Checkpoint, infer_adapt

__all__ = [
    "Protocol",
    "ReportRow",
    "EvalReport",
    "baseline_mean",
    "baseline_linear_interp",
    "method_registry",
    "run_protocol",
    "report_csv_lines",
    "report_summary",
    "save_report",
    "export_latents",
    "plot_series_svg",
]

SPLIT_MODES = ("single-city", "cross-city", "unseen-series", "unseen-city")


@dataclass(frozen=True)
class Protocol:
    """Observation rates, mask seeds, and the experiment split this run mirrors."""

    rates: tuple[float, ...] = (0.20, 0.10, 0.05, 0.01)
    seeds: tuple[int, ...] = (0,)
    mode: str = "cross-city"

    def __post_init__(self):
        if not self.rates or any(not 0.0 < r <= 1.0 for r in self.rates):
            raise ContractError("rates must be a non-empty tuple inside (0, 1]")
        if not self.seeds:
            raise ContractError("at least one mask seed is required")
        if self.mode not in SPLIT_MODES:
            raise ContractError(f"split mode must be one of {SPLIT_MODES}")


@dataclass(frozen=True)
class ReportRow:
    city: str
    series_id: str
    method: str
    rate: float
    mae: float
    mse: float


@dataclass
class EvalReport:
    rows: list[ReportRow]
    protocol: Protocol
    methods: tuple[str, ...]
    runtime_seconds: dict[str, float] = field(default_factory=dict)


def baseline_mean(inst: TimeSeriesInstance) -> np.ndarray:
    """Predict the masked mean of the observed values everywhere."""
    observed = inst.mask == 1
    if not observed.any():
        raise ContractError(f"series {inst.id}: no observed entries")
    return np.full(len(inst), float(inst.values[observed].mean()))


def baseline_linear_interp(inst: TimeSeriesInstance) -> np.ndarray:
    """Piecewise-linear in timestamp between observed neighbors, constant at
    the ends; collapses to a constant with a single observation."""
    observed = inst.mask == 1
    if not observed.any():
        raise ContractError(f"series {inst.id}: no observed entries")
    return np.interp(
        inst.timestamps, inst.timestamps[observed], inst.values[observed]
    )


def _model_method(checkpoint: Checkpoint, steps: int | None):
    def predict(inst: TimeSeriesInstance) -> np.ndarray:
        _, pred = infer_adapt(
            inst, checkpoint.params, checkpoint.train_config, steps=steps
        )
        return pred

    return predict


def method_registry(
    checkpoint: Checkpoint | None = None, adapt_steps: int | None = None
) -> dict[str, Callable[[TimeSeriesInstance], np.ndarray]]:
    """Named predictors: baselines always, model paths when a checkpoint is given.

    ``meta_inr`` adapts the latent code on the masked instance; ``meta_inr_raw``
    decodes at the zero latent without adaptation.
    """
    methods: dict[str, Callable] = {
        "mean": baseline_mean,
        "linear": baseline_linear_interp,
    }
    if checkpoint is not None:
        methods["meta_inr"] = _model_method(checkpoint, adapt_steps)
        methods["meta_inr_raw"] = _model_method(checkpoint, 0)
    return methods


def run_protocol(
    dataset: list[TimeSeriesInstance],
    methods,
    protocol: Protocol,
    checkpoint: Checkpoint | None = None,
    adapt_steps: int | None = None,
) -> EvalReport:
    """Score every method on identically masked instances.

    ``methods`` is a list of registry names, or a mapping of names to
    predictor callables (a callable receives the masked instance and returns
    full-length predictions). Metrics average over the protocol's mask seeds.
    """
    if not dataset:
        raise ContractError("evaluation dataset is empty")
    if isinstance(methods, dict):
        predictors = dict(methods)
    else:
        registry = method_registry(checkpoint, adapt_steps)
        predictors = {}
        for name in methods:
            if name not in registry:
                if name.startswith("meta_inr"):
                    raise ConfigError(f"method {name!r} requires a checkpoint")
                raise ConfigError(f"unknown method {name!r}")
            predictors[name] = registry[name]
        if not {"mean", "linear"} & set(predictors):
            raise ConfigError("a protocol run needs at least one baseline method")
    if not predictors:
        raise ContractError("no methods to evaluate")

    runtime = {name: 0.0 for name in predictors}
    rows = []
    for inst in dataset:
        for rate in protocol.rates:
            scores = {name: [] for name in predictors}
            for seed in protocol.seeds:
                masked, eval_mask = apply_masking(
                    inst, MaskSpec(observation_rate=rate, seed=seed)
                )
                if not eval_mask.any():
                    raise ContractError(
                        f"series {inst.id}: rate {rate} hides no positions"
                    )
                for name, predict in predictors.items():
                    start = time.perf_counter()
                    pred = predict(masked)
                    runtime[name] += time.perf_counter() - start
                    scores[name].append(znorm_metrics(pred, inst.values, eval_mask))
            for name, pairs in scores.items():
                rows.append(
                    ReportRow(
                        city=inst.city,
                        series_id=inst.id,
                        method=name,
                        rate=rate,
                        mae=float(np.mean([p[0] for p in pairs])),
                        mse=float(np.mean([p[1] for p in pairs])),
                    )
                )
    rows.sort(key=lambda r: (r.city, r.series_id, r.method, -r.rate))
    return EvalReport(
        rows=rows,
        protocol=protocol,
        methods=tuple(sorted(predictors)),
        runtime_seconds=runtime,
    )


def report_csv_lines(report: EvalReport) -> list[str]:
    lines = ["city,series_id,method,rate,mae,mse"]
    for r in report.rows:
        lines.append(
            f"{r.city},{r.series_id},{r.method},{r.rate:g},{r.mae:.10g},{r.mse:.10g}"
        )
    return lines


def report_summary(report: EvalReport) -> dict:
    """Aggregates: unweighted means per (method, rate) overall and per city."""

    def aggregate(rows):
        out = {}
        for r in rows:
            key = (r.method, r.rate)
            out.setdefault(key, []).append((r.mae, r.mse))
        return {
            f"{method}@{rate:g}": {
                "mae": float(np.mean([p[0] for p in pairs])),
                "mse": float(np.mean([p[1] for p in pairs])),
                "n_series": len(pairs),
            }
            for (method, rate), pairs in sorted(out.items())
        }

    cities = sorted({r.city for r in report.rows})
    return {
        "protocol": {
            "rates": list(report.protocol.rates),
            "seeds": list(report.protocol.seeds),
            "mode": report.protocol.mode,
        },
        "methods": list(report.methods),
        "overall": aggregate(report.rows),
        "per_city": {
            city: aggregate([r for r in report.rows if r.city == city])
            for city in cities
        },
        "runtime_seconds": {
            k: round(v, 6) for k, v in sorted(report.runtime_seconds.items())
        },
    }


def save_report(report: EvalReport, csv_path, json_path) -> None:
    import json

    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(report_csv_lines(report)) + "\n")
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report_summary(report), fh, indent=2, sort_keys=True)
        fh.write("\n")


def export_latents(
    dataset: list[TimeSeriesInstance],
    checkpoint: Checkpoint,
    path,
    rate: float = 0.10,
    seed: int = 0,
    adapt_steps: int | None = None,
) -> None:
    """One CSV row per instance: id, city, and the adapted latent code at the
    given observation rate."""
    latent_dim = checkpoint.params.config.latent_dim
    header = ["series_id", "city"] + [f"z{i}" for i in range(latent_dim)]
    lines = [",".join(header)]
    for inst in dataset:
        masked, _ = apply_masking(inst, MaskSpec(observation_rate=rate, seed=seed))
        phi, _ = infer_adapt(
            masked, checkpoint.params, checkpoint.train_config, steps=adapt_steps
        )
        entries = [inst.id, inst.city] + [f"{v:.12g}" for v in phi.reshape(-1)]
        lines.append(",".join(entries))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


_SVG_PALETTE = ("#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def plot_series_svg(
    inst: TimeSeriesInstance, predictions: dict[str, np.ndarray], path
) -> None:
    """Standalone SVG: ground truth, observed markers, one polyline per method."""
    width, height, pad = 800.0, 300.0, 40.0
    t = inst.timestamps
    series = [np.asarray(inst.values)] + [np.asarray(p) for p in predictions.values()]
    lo = min(float(s.min()) for s in series)
    hi = max(float(s.max()) for s in series)
    if hi == lo:
        hi = lo + 1.0

    def sx(tv):
        return pad + (tv - t[0]) / (t[-1] - t[0]) * (width - 2 * pad)

    def sy(v):
        return height - pad - (v - lo) / (hi - lo) * (height - 2 * pad)

    def polyline(values, color, dash=""):
        pts = " ".join(f"{sx(tv):.2f},{sy(v):.2f}" for tv, v in zip(t, values))
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        return (
            f'<polyline fill="none" stroke="{color}" stroke-width="1.5"{extra} '
            f'points="{pts}"/>'
        )

    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:g}" '
        f'height="{height:g}" viewBox="0 0 {width:g} {height:g}">',
        f'<rect width="{width:g}" height="{height:g}" fill="white"/>',
        polyline(inst.values, "#444444", dash="4 3"),
    ]
    legend = [("truth", "#444444")]
    for i, (name, pred) in enumerate(predictions.items()):
        color = _SVG_PALETTE[i % len(_SVG_PALETTE)]
        parts.append(polyline(pred, color))
        legend.append((name, color))
    for tv, v, m in zip(t, inst.values, inst.mask):
        if m == 1:
            parts.append(
                f'<circle cx="{sx(tv):.2f}" cy="{sy(v):.2f}" r="2.5" fill="#222222"/>'
            )
    for i, (name, color) in enumerate(legend):
        y = pad / 2 + 14 * i
        parts.append(
            f'<line x1="{pad:g}" y1="{y:.2f}" x2="{pad + 20:g}" y2="{y:.2f}" '
            f'stroke="{color}" stroke-width="2"/>'
        )
        parts.append(
            f'<text x="{pad + 26:g}" y="{y + 4:.2f}" font-family="monospace" '
            f'font-size="11">{saxutils.escape(name)}</text>'
        )
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts) + "\n")
