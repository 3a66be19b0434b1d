"""Command-line entry point.

Subcommands: ``synth | train | impute | eval | gradcheck | export-latents``.
Every run is driven by an optional JSON config document (one section per
subcommand) with flag overrides on top; given identical inputs and seeds,
every subcommand writes byte-identical outputs.

Exit codes: 0 success, 2 usage/config, 3 data, 4 numeric. Failures print a
single machine-parsable line ``error[<kind>]: <message>`` to stderr.

``--threads N`` pins the BLAS thread pools (set before numpy loads, which is
why heavy imports happen inside ``main``); ``--threads 1`` is the default and
the bitwise-deterministic mode.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def _peek_threads(argv: list[str]) -> int:
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            try:
                return max(1, int(argv[i + 1]))
            except ValueError:
                return 1
        if arg.startswith("--threads="):
            try:
                return max(1, int(arg.split("=", 1)[1]))
            except ValueError:
                return 1
    return 1


def _apply_thread_env(n: int) -> None:
    for var in _THREAD_VARS:
        os.environ.setdefault(var, str(n))


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metainr",
        description="Meta-learned coordinate networks for time-series imputation",
    )
    parser.add_argument("--config", help="JSON config document")
    parser.add_argument("--seed", type=int, help="override the section seed")
    parser.add_argument("--threads", type=int, default=1, help="BLAS thread count")
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", help="write the synthetic dataset CSV")
    p_train = sub.add_parser("train", help="meta-train and write checkpoints")
    p_train.add_argument("--dataset", help="dataset CSV path")
    for name in ("impute", "eval", "export-latents"):
        p = sub.add_parser(name)
        p.add_argument("--dataset", help="dataset CSV path")
        p.add_argument("--checkpoint", help="checkpoint path")
    sub.add_parser("gradcheck", help="finite-difference gradient audit")
    return parser


def _load_config(path: str | None) -> dict:
    from .errors import ConfigError

    if path is None:
        return {}
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    return doc


def _section(doc: dict, name: str) -> dict:
    from .errors import ConfigError

    section = doc.get(name, {})
    if not isinstance(section, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    return dict(section)


def _build_dataclass(cls, section: dict, where: str, tuple_fields=()):
    """Dataclass from a JSON section, rejecting unknown fields by name."""
    from .errors import ConfigError, ContractError

    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(section) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown field {unknown[0]!r}")
    kwargs = {
        k: tuple(v) if k in tuple_fields and isinstance(v, list) else v
        for k, v in section.items()
    }
    try:
        return cls(**kwargs)
    except (TypeError, ContractError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _pop(section: dict, key: str, default=None):
    return section.pop(key) if key in section else default


def _out_path(out_dir: str, path: str) -> str:
    if os.path.isabs(path):
        return path
    os.makedirs(out_dir, exist_ok=True)
    return os.path.join(out_dir, path)


def _cmd_synth(args, doc) -> int:
    from .data import SynthFamilyConfig, synth_generate, write_csv

    section = _section(doc, "synth")
    path = _pop(section, "path", "dataset.csv")
    if args.seed is not None:
        section["seed"] = args.seed
    cfg = _build_dataclass(
        SynthFamilyConfig,
        section,
        "synth",
        tuple_fields=(
            "length_range",
            "frequency_count_range",
            "frequency_range",
            "amplitude_range",
            "phase_range",
            "trend_range",
            "offset_range",
            "scale_range",
        ),
    )
    instances = synth_generate(cfg)
    out = _out_path(args.out, path)
    write_csv(out, instances)
    print(f"wrote {len(instances)} series ({sum(len(i) for i in instances)} rows) to {out}")
    return 0


def _load_dataset(path_flag, section, args):
    from .data import load_csv
    from .errors import ConfigError, DataError

    path = path_flag or _pop(section, "dataset")
    if not path:
        raise ConfigError("missing dataset path (flag --dataset or config field)")
    if not os.path.exists(path):
        raise DataError(f"dataset file not found: {path}")
    return load_csv(path)


def _mask_dataset(instances, section):
    from .data import MaskSpec, apply_masking

    rate = _pop(section, "observe_rate", 1.0)
    mask_seed = _pop(section, "mask_seed", 0)
    if rate >= 1.0:
        return instances
    spec_kwargs = dict(observation_rate=float(rate), seed=int(mask_seed))
    return [apply_masking(inst, MaskSpec(**spec_kwargs))[0] for inst in instances]


def _train_config(section: dict, args):
    from .model import ModelConfig
    from .trainer import TrainConfig

    if args.seed is not None:
        section["seed"] = args.seed
    model_section = _pop(section, "model", {})
    model = _build_dataclass(
        ModelConfig,
        dict(model_section),
        "train.model",
        tuple_fields=("input_scales", "layer_scales", "axis_dims"),
    )
    section["model"] = model
    return _build_dataclass(TrainConfig, section, "train")


def _cmd_train(args, doc) -> int:
    from .checkpoint import save_checkpoint
    from .trainer import train

    section = _section(doc, "train")
    dataset = _load_dataset(args.dataset, section, args)
    dataset = _mask_dataset(dataset, section)
    best_path = _out_path(args.out, _pop(section, "checkpoint", "checkpoint.bin"))
    final_path = _out_path(args.out, _pop(section, "final_checkpoint", "checkpoint-final.bin"))
    log_path = _out_path(args.out, _pop(section, "log", "train_log.csv"))
    config = _train_config(section, args)

    progress = None
    if args.verbose:
        progress = lambda rec: print(
            f"epoch {rec['epoch']:4d}  loss {rec['train_loss']:.6f}  "
            f"val_mae {rec['val_mae']:.6f}"
        )
    result = train(dataset, config, progress=progress)
    save_checkpoint(best_path, result.best)
    save_checkpoint(final_path, result.final)
    with open(log_path, "w", encoding="utf-8", newline="") as fh:
        fh.write("epoch,train_loss,val_mae\n")
        for rec in result.history:
            fh.write(f"{rec['epoch']},{rec['train_loss']:.10g},{rec['val_mae']:.10g}\n")
    last = result.history[-1]["train_loss"] if result.history else float("nan")
    print(
        f"trained {config.epochs} epochs on {len(dataset)} series "
        f"(final loss {last:.6g}); best epoch {result.best.epoch} -> {best_path}"
    )
    return 0


def _load_checkpoint_arg(args, section):
    from .checkpoint import load_checkpoint
    from .errors import ConfigError, DataError

    path = getattr(args, "checkpoint", None) or _pop(section, "checkpoint")
    if not path:
        raise ConfigError("missing checkpoint path (flag --checkpoint or config field)")
    if not os.path.exists(path):
        raise DataError(f"checkpoint file not found: {path}")
    return load_checkpoint(path)


def _cmd_impute(args, doc) -> int:
    from .trainer import infer_adapt

    section = _section(doc, "impute")
    dataset = _load_dataset(args.dataset, section, args)
    ckpt = _load_checkpoint_arg(args, section)
    dataset = _mask_dataset(dataset, section)
    out = _out_path(args.out, _pop(section, "output", "imputed.csv"))
    steps = _pop(section, "adapt_steps")
    overwrite = bool(_pop(section, "overwrite_observed", True))

    rows = 0
    with open(out, "w", encoding="utf-8", newline="") as fh:
        fh.write("series_id,timestamp,value,imputed_flag\n")
        for inst in dataset:
            _, pred = infer_adapt(
                inst,
                ckpt.params,
                ckpt.train_config,
                steps=steps,
                overwrite_observed=overwrite,
            )
            for t, v, m in zip(inst.timestamps, pred, inst.mask):
                fh.write(f"{inst.id},{float(t)!r},{float(v)!r},{1 - int(m)}\n")
                rows += 1
    print(f"imputed {len(dataset)} series ({rows} rows) -> {out}")
    return 0


def _cmd_eval(args, doc) -> int:
    from .evaluation import Protocol, plot_series_svg, run_protocol, save_report
    from .data import MaskSpec, apply_masking, mask_rng  # noqa: F401 (mask parity helper)
    from .evaluation import method_registry

    section = _section(doc, "eval")
    dataset = _load_dataset(args.dataset, section, args)
    methods = _pop(section, "methods")
    rates = tuple(_pop(section, "rates", (0.20, 0.10, 0.05, 0.01)))
    seeds = _pop(section, "mask_seeds", [0])
    if args.seed is not None:
        seeds = [args.seed]
    mode = _pop(section, "mode", "cross-city")
    adapt_steps = _pop(section, "adapt_steps")
    plots = int(_pop(section, "plots", 0))
    csv_path = _out_path(args.out, _pop(section, "report_csv", "report.csv"))
    json_path = _out_path(args.out, _pop(section, "report_json", "report.json"))

    ckpt = None
    wants_model = methods is None or any(str(m).startswith("meta_inr") for m in methods)
    if getattr(args, "checkpoint", None) or section.get("checkpoint") or wants_model:
        try:
            ckpt = _load_checkpoint_arg(args, section)
        except Exception:
            if methods is not None and wants_model:
                raise
            ckpt = None
    if methods is None:
        methods = ["mean", "linear"] + (["meta_inr"] if ckpt else [])

    protocol = Protocol(rates=rates, seeds=tuple(int(s) for s in seeds), mode=mode)
    report = run_protocol(
        dataset, list(methods), protocol, checkpoint=ckpt, adapt_steps=adapt_steps
    )
    save_report(report, csv_path, json_path)

    if plots > 0:
        registry = method_registry(ckpt, adapt_steps)
        rate = protocol.rates[0]
        for inst in dataset[:plots]:
            masked, _ = apply_masking(
                inst, MaskSpec(observation_rate=rate, seed=protocol.seeds[0])
            )
            preds = {name: registry[name](masked) for name in methods}
            plot_series_svg(
                masked, preds, _out_path(args.out, f"plot_{inst.id}.svg")
            )

    from .evaluation import report_summary

    overall = report_summary(report)["overall"]
    for key, agg in overall.items():
        print(f"{key}: mae {agg['mae']:.4f}  mse {agg['mse']:.4f}")
    print(f"report -> {csv_path}")
    return 0


def _cmd_export_latents(args, doc) -> int:
    from .evaluation import export_latents

    section = _section(doc, "export_latents")
    dataset = _load_dataset(args.dataset, section, args)
    ckpt = _load_checkpoint_arg(args, section)
    out = _out_path(args.out, _pop(section, "output", "latents.csv"))
    rate = float(_pop(section, "rate", 0.10))
    seed = int(_pop(section, "mask_seed", 0 if args.seed is None else args.seed))
    steps = _pop(section, "adapt_steps")
    export_latents(dataset, ckpt, out, rate=rate, seed=seed, adapt_steps=steps)
    print(f"exported {len(dataset)} latent codes -> {out}")
    return 0


def gradcheck_suite(tolerance: float = 1e-4, step: float = 1e-6):
    """The toy graph suite behind ``metainr gradcheck``: a quadratic, a small
    sine MLP, and the full pipeline loss on a 16-cell instance. Returns
    (name, GradCheckReport) pairs."""
    import numpy as np

    from . import autodiff as ad
    from .autodiff import Tensor, finite_diff_check
    from .data import TimeSeriesInstance
    from .model import ModelConfig, ModelTensors, init_params
    from .trainer import TrainConfig, instance_loss, prepare_instance

    rng = np.random.default_rng(7)
    reports = []

    x_const = rng.normal(size=(4, 3))
    quad_params = {"w": rng.normal(size=(3, 3)), "b": rng.normal(size=3)}

    def quad_loss(t):
        return ad.square(ad.add(ad.matmul(Tensor(x_const), t["w"]), t["b"])).sum()

    reports.append(("quadratic", finite_diff_check(quad_loss, quad_params, step, tolerance)))

    mlp_params = {
        "w0": rng.normal(size=(2, 8)) * 0.7,
        "w1": rng.normal(size=(8, 8)) * 0.4,
        "w2": rng.normal(size=(8, 1)) * 0.4,
    }
    mlp_in = rng.normal(size=(6, 2))

    def mlp_loss(t):
        h = ad.sin(ad.matmul(Tensor(mlp_in), t["w0"]))
        h = ad.sin(ad.matmul(h, t["w1"]))
        return ad.square(ad.matmul(h, t["w2"])).mean()

    reports.append(("sine_mlp", finite_diff_check(mlp_loss, mlp_params, step, tolerance)))

    model_cfg = ModelConfig(
        layers=2,
        hidden=8,
        feat_per_scale=4,
        input_scales=(1.0, 5.0),
        layer_scales=(5.0, 1.0),
        axis_dims=(3, 3),
        latent_dim=4,
    )
    train_cfg = TrainConfig(embed_dim=2, tv_weight=1e-2, model=model_cfg, seed=7)
    params = init_params(model_cfg, seed=7)
    mask = np.ones(9, dtype=np.int8)
    mask[rng.choice(9, size=3, replace=False)] = 0
    inst = TimeSeriesInstance(
        id="toy",
        city="toy",
        timestamps=np.arange(9, dtype=np.float64),
        values=np.asarray(rng.normal(size=9)),
        mask=mask,
    )
    prep = prepare_instance(inst, train_cfg, params)
    pipeline_params = dict(params.named_arrays())
    pipeline_params["phi"] = rng.normal(size=(1, model_cfg.latent_dim)) * 0.3

    def pipeline_loss(t):
        mt = ModelTensors.from_named(model_cfg, t)
        return instance_loss(prep, t["phi"], mt, train_cfg.tv_weight)

    reports.append(
        ("full_pipeline", finite_diff_check(pipeline_loss, pipeline_params, step, tolerance))
    )
    return reports


def _cmd_gradcheck(args, doc) -> int:
    section = _section(doc, "gradcheck")
    tolerance = float(_pop(section, "tolerance", 1e-4))
    step = float(_pop(section, "step", 1e-6))
    ok = True
    for name, report in gradcheck_suite(tolerance=tolerance, step=step):
        verdict = "pass" if report.passed else "FAIL"
        print(f"[{verdict}] {name}: max_rel {report.max_rel_err:.3e}  "
              f"max_abs {report.max_abs_err:.3e}")
        for entry in report.entries:
            print(f"    {entry.name}: rel {entry.max_rel_err:.3e}  abs {entry.max_abs_err:.3e}")
        ok = ok and report.passed
    print(f"gradcheck {'passed' if ok else 'failed'} (tolerance {tolerance:g})")
    return 0 if ok else 4


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    _apply_thread_env(_peek_threads(argv))

    parser = _build_parser()
    args = parser.parse_args(argv)

    from .errors import (
        ConfigError,
        ContractError,
        DataError,
        DimensionError,
        FormatError,
        NumericError,
        ParseError,
    )

    handlers = {
        "synth": _cmd_synth,
        "train": _cmd_train,
        "impute": _cmd_impute,
        "eval": _cmd_eval,
        "gradcheck": _cmd_gradcheck,
        "export-latents": _cmd_export_latents,
    }
    try:
        doc = _load_config(args.config)
        return handlers[args.command](args, doc)
    except ConfigError as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
        return 2
    except (ParseError, DataError, FormatError, ContractError) as exc:
        print(f"error[data]: {exc}", file=sys.stderr)
        return 3
    except (NumericError, DimensionError) as exc:
        print(f"error[numeric]: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
