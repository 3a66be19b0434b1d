"""Two-loop meta-training and few-step inference adaptation.

Per instance: normalize by masked statistics, delay-embed values and mask,
then fit grid cells. The inner loop auto-decodes a per-instance latent code
by a few SGD steps from zero with shared parameters frozen; the outer loop
applies one Adam step to the shared parameters against the batch-mean loss
with the adapted codes frozen (first-order scheme: no gradients flow through
the inner updates). Inference reuses the inner loop on a new instance's
observed entries, decodes the full grid, averages overlaps back to the time
axis, and de-normalizes.

The loss per instance is the mean squared error over observed cells plus an
optional variation penalty: the mean squared first difference of the
inverse-embedded prediction along time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import (
    DEFAULT_EPSILON,
    NormStats,
    TimeSeriesInstance,
    denormalize,
    masked_instance_normalize,
    znorm_metrics,
)
from .embedding import DelayConfig, EmbeddedGrid, default_embed_dim, delay_embed, overlap_counts, inverse_embed
from .errors import ContractError, NumericError
from .model import (
    AxisFeatures,
    ModelConfig,
    ModelParams,
    ModelTensors,
    axis_features,
    grid_forward,
    init_params,
)

__all__ = [
    "TrainConfig",
    "AdamState",
    "adam_step",
    "PreparedInstance",
    "prepare_instance",
    "instance_loss",
    "inner_adapt",
    "outer_step",
    "train",
    "TrainResult",
    "Checkpoint",
    "infer_adapt",
    "impute",
    "decode_series",
    "latent_interpolate",
]

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    """Optimization and pipeline hyperparameters (desk-scale defaults)."""

    inner_lr: float = 1e-2
    outer_lr: float = 5e-4
    inner_steps: int = 3
    batch_size: int = 8
    epochs: int = 40
    tv_weight: float = 1e-4
    embed_dim: int | None = None  # None: pick from series length
    delay: int = 1
    epsilon: float = DEFAULT_EPSILON
    normalize: bool = True
    val_fraction: float = 0.1
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.inner_lr < 0 or self.outer_lr < 0:
            raise ContractError("learning rates must be >= 0")
        if self.inner_steps < 0:
            raise ContractError("inner step count must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ContractError("batch size must be >= 1 and epochs >= 0")
        if self.tv_weight < 0:
            raise ContractError("variation-penalty weight must be >= 0")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ContractError("validation fraction must lie in [0, 1)")


@dataclass
class AdamState:
    """First/second moment buffers mirroring the trainable arrays."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: ModelParams) -> "AdamState":
        return cls(
            m={name: np.zeros_like(arr) for name, arr in params.named_arrays()},
            v={name: np.zeros_like(arr) for name, arr in params.named_arrays()},
        )


def adam_step(
    state: AdamState, params: ModelParams, grads: dict[str, np.ndarray], lr: float
) -> None:
    """One bias-corrected Adam update, in place on the parameter arrays."""
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for name, arr in params.named_arrays():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        arr -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class PreparedInstance:
    """Everything per-instance the loops reuse: normalized grid, coordinate
    features (graph constants), and overlap bookkeeping."""

    instance: TimeSeriesInstance
    stats: NormStats
    delay: DelayConfig
    grid: EmbeddedGrid
    row_feats: AxisFeatures
    col_feats: AxisFeatures
    idx_flat: np.ndarray
    inv_counts: np.ndarray
    n_observed_cells: int


def prepare_instance(
    inst: TimeSeriesInstance, config: TrainConfig, params: ModelParams
) -> PreparedInstance:
    if inst.n_observed == 0:
        raise ContractError(f"series {inst.id}: no observed entries")
    if config.normalize:
        norm_inst, stats = masked_instance_normalize(inst, config.epsilon)
    else:
        norm_inst, stats = inst, NormStats(mean=0.0, var=1.0, epsilon=0.0)
    m = config.embed_dim if config.embed_dim is not None else default_embed_dim(len(inst))
    delay = DelayConfig(m=m, delta=config.delay)
    grid = delay_embed(norm_inst.values, delay, mask=inst.mask)
    counts = overlap_counts(delay, len(inst))
    return PreparedInstance(
        instance=inst,
        stats=stats,
        delay=delay,
        grid=grid,
        row_feats=axis_features(grid.coord_row, params.crf),
        col_feats=axis_features(grid.coord_col, params.crf),
        idx_flat=np.ascontiguousarray(grid.time_index.reshape(-1)),
        inv_counts=1.0 / counts.astype(np.float64),
        n_observed_cells=int(grid.cell_mask.sum()),
    )


def instance_loss(
    prep: PreparedInstance, phi: Tensor, mt: ModelTensors, tv_weight: float
) -> Tensor:
    """Masked cell MSE plus the weighted variation penalty, as a graph node."""
    if prep.n_observed_cells == 0:
        raise ContractError(f"series {prep.instance.id}: no observed grid cells")
    pred = grid_forward(mt, prep.row_feats, prep.col_feats, phi)
    sq = ad.square(ad.sub(pred, Tensor(prep.grid.cell_values)))
    data = ad.scale(ad.mul(sq, Tensor(prep.grid.cell_mask)).sum(), 1.0 / prep.n_observed_cells)
    if tv_weight == 0.0:
        return data
    series = ad.index_mean(pred, prep.idx_flat, prep.inv_counts)
    step = ad.sub(series[1:], series[:-1])
    return ad.add(data, ad.scale(ad.square(step).mean(), tv_weight))


def _zero_latent(config: ModelConfig) -> np.ndarray:
    return np.zeros((1, config.latent_dim))


def inner_adapt(
    prep: PreparedInstance,
    params: ModelParams,
    config: TrainConfig,
    steps: int | None = None,
) -> np.ndarray:
    """Auto-decode the latent code: K SGD steps from zero, shared parameters
    frozen. Returns the adapted code as a (1, latent_dim) array."""
    steps = config.inner_steps if steps is None else steps
    phi = _zero_latent(config.model)
    for k in range(1, steps + 1):
        mt = ModelTensors.wrap(params, requires_grad=False)
        phi_t = Tensor(phi, requires_grad=True)
        with Tape() as tape:
            loss = instance_loss(prep, phi_t, mt, config.tv_weight)
        tape.backward(loss)
        grad = phi_t.grad
        if grad is None:
            grad = np.zeros_like(phi)
        if not np.isfinite(grad).all():
            raise NumericError(
                f"series {prep.instance.id}: non-finite latent gradient at inner step {k}"
            )
        phi = phi - config.inner_lr * grad
    return phi


def outer_step(
    batch: list[PreparedInstance],
    params: ModelParams,
    adam: AdamState,
    config: TrainConfig,
) -> float:
    """Adapt each instance, then one Adam step on the batch-mean loss with the
    adapted codes treated as constants. Returns the batch loss."""
    if not batch:
        raise ContractError("outer step over an empty batch")
    mt = ModelTensors.wrap(params, requires_grad=True)
    total = 0.0
    for prep in batch:
        phi = inner_adapt(prep, params, config)
        with Tape() as tape:
            loss = instance_loss(prep, Tensor(phi), mt, config.tv_weight)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(f"series {prep.instance.id}: non-finite training loss")
        tape.backward(loss, seed=1.0 / len(batch))
        total += value
    grads = {
        name: (t.grad if t.grad is not None else np.zeros(t.shape))
        for name, t in mt.named()
    }
    adam_step(adam, params, grads, config.outer_lr)
    return total / len(batch)


def decode_series(
    phi, prep: PreparedInstance, params: ModelParams, overwrite_observed: bool = False
) -> np.ndarray:
    """Evaluate the grid, average overlaps to the time axis, de-normalize."""
    mt = ModelTensors.wrap(params, requires_grad=False)
    pred = grid_forward(mt, prep.row_feats, prep.col_feats, Tensor(np.asarray(phi).reshape(1, -1)))
    series = inverse_embed(pred.data, prep.delay, len(prep.instance))
    out = denormalize(series, prep.stats)
    if overwrite_observed:
        observed = prep.instance.mask == 1
        out[observed] = prep.instance.values[observed]
    return out


def impute(
    inst: TimeSeriesInstance,
    phi,
    params: ModelParams,
    config: TrainConfig,
    overwrite_observed: bool = True,
) -> np.ndarray:
    """Full-length predictions in the original scale for one instance."""
    prep = prepare_instance(inst, config, params)
    return decode_series(phi, prep, params, overwrite_observed=overwrite_observed)


def infer_adapt(
    inst: TimeSeriesInstance,
    params: ModelParams,
    config: TrainConfig,
    steps: int | None = None,
    overwrite_observed: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Few-shot path for a (possibly unseen) instance: adapt the latent code
    against observed entries only, then impute. Never touches ``params``."""
    prep = prepare_instance(inst, config, params)
    phi = inner_adapt(prep, params, config, steps=steps)
    return phi, decode_series(phi, prep, params, overwrite_observed=overwrite_observed)


def latent_interpolate(
    phi_a, phi_b, mu: float, prep: PreparedInstance, params: ModelParams
) -> np.ndarray:
    """Decode ``mu * phi_a + (1 - mu) * phi_b`` through the imputation
    pipeline, using the supplied instance context for shapes and statistics."""
    if not 0.0 <= mu <= 1.0:
        raise ContractError(f"interpolation weight must lie in [0, 1], got {mu}")
    phi_a = np.asarray(phi_a, dtype=np.float64).reshape(1, -1)
    phi_b = np.asarray(phi_b, dtype=np.float64).reshape(1, -1)
    if mu == 1.0:
        phi = phi_a
    elif mu == 0.0:
        phi = phi_b
    else:
        phi = mu * phi_a + (1.0 - mu) * phi_b
    return decode_series(phi, prep, params, overwrite_observed=False)


@dataclass
class Checkpoint:
    """A trained model plus everything needed to rebuild and audit it."""

    train_config: TrainConfig
    params: ModelParams
    epoch: int
    history: list[dict]
    format_version: int = CHECKPOINT_FORMAT_VERSION


@dataclass
class TrainResult:
    final: Checkpoint
    best: Checkpoint
    history: list[dict]


def _validation_mae(
    preps: list[PreparedInstance], params: ModelParams, config: TrainConfig
) -> float:
    maes = []
    for prep in preps:
        phi = inner_adapt(prep, params, config)
        pred = decode_series(phi, prep, params)
        inst = prep.instance
        hidden = inst.mask == 0
        sel = hidden if hidden.any() else np.ones(len(inst), dtype=bool)
        mae, _ = znorm_metrics(pred, inst.values, sel)
        maes.append(mae)
    return float(np.mean(maes))


def train(
    dataset: list[TimeSeriesInstance], config: TrainConfig, progress=None
) -> TrainResult:
    """Epochs of shuffled outer steps with per-epoch held-out scoring.

    Deterministic per seed. Returns the final checkpoint and the checkpoint
    of the epoch with the best validation z-MAE. ``progress``, when given, is
    called with each epoch's history record.
    """
    if not dataset:
        raise ContractError("training dataset is empty")
    params = init_params(config.model, config.seed)
    adam = AdamState.init(params)
    preps = [prepare_instance(inst, config, params) for inst in dataset]

    n = len(preps)
    n_val = 0
    if config.val_fraction > 0.0 and n >= 2:
        n_val = min(max(1, round(config.val_fraction * n)), n - 1)
    split_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 100]))
    val_idx = set(split_rng.choice(n, size=n_val, replace=False).tolist())
    train_preps = [p for i, p in enumerate(preps) if i not in val_idx]
    val_preps = [p for i, p in enumerate(preps) if i in val_idx]

    shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 101]))
    history: list[dict] = []
    best_mae = math.inf
    best_params = params.copy()
    best_epoch = 0
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(len(train_preps))
        losses = []
        for lo in range(0, len(order), config.batch_size):
            batch = [train_preps[i] for i in order[lo : lo + config.batch_size]]
            try:
                losses.append(outer_step(batch, params, adam, config))
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}: {exc}") from None
        val_mae = _validation_mae(val_preps, params, config) if val_preps else math.nan
        history.append(
            {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_mae": val_mae}
        )
        if progress is not None:
            progress(history[-1])
        if val_preps and val_mae < best_mae:
            best_mae = val_mae
            best_params = params.copy()
            best_epoch = epoch

    final = Checkpoint(config, params, epoch=config.epochs, history=history)
    if not val_preps:
        best_params, best_epoch = params.copy(), config.epochs
    best = Checkpoint(config, best_params, epoch=best_epoch, history=history)
    return TrainResult(final=final, best=best, history=history)
