"""Factorized multi-scale sine network with hierarchical latent modulation.

The model maps a pair of grid-axis coordinates to a scalar through two axis
subnetworks contracted by a core matrix: ``out = u(c1)^T C v(c2)``. Each axis
subnetwork consumes concatenated random Fourier features of its coordinate,
runs ``L`` sine layers whose pre-activations receive per-layer Fourier
features of decreasing bandwidth and whose activations are gated by
modulation vectors, and sums ReLU output heads taken from every depth plus a
final linear head.

Modulations are affine in a per-instance latent code through a skip-
accumulated linear hypernetwork, so a zero latent leaves the network at its
shared base behavior (all gates equal one).

Only numpy arrays live here; graph building happens on demand by wrapping
arrays in autodiff tensors, so the same forward code serves training (under a
tape) and plain evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError

__all__ = [
    "ModelConfig",
    "CRFBundle",
    "MappingNetParams",
    "HyperNetParams",
    "ModelParams",
    "ModelTensors",
    "AxisFeatures",
    "init_params",
    "crf_features",
    "axis_features",
    "modulations_from_latent",
    "mapping_forward",
    "grid_forward",
    "axis_eval",
    "factorized_forward",
    "lipschitz_bound",
]

PAPER_INPUT_SCALES = (0.01, 0.1, 1.0, 5.0, 10.0, 20.0, 50.0, 100.0)
PAPER_LAYER_SCALES = (10.0, 5.0, 1.0, 0.1, 0.01)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters (desk-scale defaults)."""

    layers: int = 3
    hidden: int = 128
    feat_per_scale: int = 32
    input_scales: tuple[float, ...] = PAPER_INPUT_SCALES
    layer_scales: tuple[float, ...] = PAPER_LAYER_SCALES[:3]
    axis_dims: tuple[int, int] = (16, 16)
    latent_dim: int = 64

    def __post_init__(self):
        if self.layers < 1:
            raise ContractError("need at least one sine layer")
        if self.feat_per_scale < 2 or self.feat_per_scale % 2:
            raise ContractError("feat_per_scale must be a positive even integer")
        if min(self.hidden, self.latent_dim, *self.axis_dims) < 1:
            raise ContractError("all widths must be positive")
        if not self.input_scales or any(s <= 0 for s in self.input_scales):
            raise ContractError("input scales must be positive")
        if len(self.layer_scales) != self.layers:
            raise ContractError(
                f"need one layer scale per sine layer "
                f"({len(self.layer_scales)} scales for {self.layers} layers)"
            )
        if any(s <= 0 for s in self.layer_scales):
            raise ContractError("layer scales must be positive")
        if any(a < b for a, b in zip(self.layer_scales, self.layer_scales[1:])):
            raise ContractError("layer scales must be non-increasing")

    @property
    def n_scales(self) -> int:
        return len(self.input_scales)

    @property
    def feature_dim(self) -> int:
        return self.feat_per_scale * self.n_scales


@dataclass(frozen=True)
class CRFBundle:
    """Fixed (non-trainable) Fourier bases and per-layer projection maps."""

    input_scales: tuple[float, ...]
    input_bases: list[np.ndarray]  # per scale, (feat_per_scale / 2,)
    layer_scales: tuple[float, ...]
    layer_bases: list[np.ndarray]  # per sine layer, (feat_per_scale / 2,)
    layer_proj: list[np.ndarray]  # per sine layer, (feat_per_scale, hidden)
    seed: int


@dataclass
class MappingNetParams:
    """One axis subnetwork; weights are stored (fan_in, fan_out)."""

    w_in: np.ndarray
    b_in: np.ndarray
    w_hid: list[np.ndarray]
    b_hid: list[np.ndarray]
    w_out: list[np.ndarray]  # ReLU heads on hidden states 1..L
    b_out: list[np.ndarray]
    w_final: np.ndarray
    b_final: np.ndarray


@dataclass
class HyperNetParams:
    """Skip-accumulated linear maps from the latent code to modulations."""

    w: list[np.ndarray]  # levels 0..L, each (latent_dim, hidden)
    b: list[np.ndarray]


@dataclass
class ModelParams:
    """Everything trainable plus the fixed Fourier machinery."""

    config: ModelConfig
    crf: CRFBundle
    axis1: MappingNetParams
    axis2: MappingNetParams
    hyper1: HyperNetParams
    hyper2: HyperNetParams
    core: np.ndarray
    seed: int

    def named_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        """Trainable arrays in a fixed order (optimizer / checkpoint order)."""
        for axis_name in ("axis1", "axis2"):
            m: MappingNetParams = getattr(self, axis_name)
            yield f"{axis_name}.w_in", m.w_in
            yield f"{axis_name}.b_in", m.b_in
            for i, (w, b) in enumerate(zip(m.w_hid, m.b_hid)):
                yield f"{axis_name}.w_hid.{i}", w
                yield f"{axis_name}.b_hid.{i}", b
            for i, (w, b) in enumerate(zip(m.w_out, m.b_out)):
                yield f"{axis_name}.w_out.{i}", w
                yield f"{axis_name}.b_out.{i}", b
            yield f"{axis_name}.w_final", m.w_final
            yield f"{axis_name}.b_final", m.b_final
        for hyper_name in ("hyper1", "hyper2"):
            h: HyperNetParams = getattr(self, hyper_name)
            for i, (w, b) in enumerate(zip(h.w, h.b)):
                yield f"{hyper_name}.w.{i}", w
                yield f"{hyper_name}.b.{i}", b
        yield "core", self.core

    def copy(self) -> "ModelParams":
        def arr(a):
            return a.copy()

        def mapping(m):
            return MappingNetParams(
                arr(m.w_in),
                arr(m.b_in),
                [arr(w) for w in m.w_hid],
                [arr(b) for b in m.b_hid],
                [arr(w) for w in m.w_out],
                [arr(b) for b in m.b_out],
                arr(m.w_final),
                arr(m.b_final),
            )

        def hyper(h):
            return HyperNetParams([arr(w) for w in h.w], [arr(b) for b in h.b])

        return ModelParams(
            config=self.config,
            crf=self.crf,
            axis1=mapping(self.axis1),
            axis2=mapping(self.axis2),
            hyper1=hyper(self.hyper1),
            hyper2=hyper(self.hyper2),
            core=arr(self.core),
            seed=self.seed,
        )


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *tags]))


def _uniform_fan_in(rng, fan_in: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _init_mapping(rng, config: ModelConfig, out_dim: int) -> MappingNetParams:
    d, f0, L = config.hidden, config.feature_dim, config.layers
    return MappingNetParams(
        w_in=_uniform_fan_in(rng, f0, (f0, d)),
        b_in=np.zeros(d),
        w_hid=[_uniform_fan_in(rng, d, (d, d)) for _ in range(L)],
        b_hid=[np.zeros(d) for _ in range(L)],
        w_out=[_uniform_fan_in(rng, d, (d, out_dim)) for _ in range(L)],
        b_out=[np.zeros(out_dim) for _ in range(L)],
        w_final=_uniform_fan_in(rng, d, (d, out_dim)),
        b_final=np.zeros(out_dim),
    )


def _init_hyper(rng, config: ModelConfig) -> HyperNetParams:
    d, L = config.hidden, config.layers
    w = [rng.normal(0.0, 0.1, size=(config.latent_dim, d)) for _ in range(L + 1)]
    # Base modulation starts at exactly one so the unadapted network (zero
    # latent) is a plain multi-scale sine network rather than annihilated.
    b = [np.ones(d)] + [np.zeros(d) for _ in range(L)]
    return HyperNetParams(w=w, b=b)


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Deterministically initialize all parameters and Fourier bases."""
    half = config.feat_per_scale // 2
    crf = CRFBundle(
        input_scales=tuple(config.input_scales),
        input_bases=[
            _rng(seed, 10, k).normal(0.0, s, size=half)
            for k, s in enumerate(config.input_scales)
        ],
        layer_scales=tuple(config.layer_scales),
        layer_bases=[
            _rng(seed, 11, i).normal(0.0, s, size=half)
            for i, s in enumerate(config.layer_scales)
        ],
        layer_proj=[
            _rng(seed, 12, i).normal(
                0.0, 1.0 / np.sqrt(config.feat_per_scale), size=(config.feat_per_scale, config.hidden)
            )
            for i in range(config.layers)
        ],
        seed=seed,
    )
    n1, n2 = config.axis_dims
    return ModelParams(
        config=config,
        crf=crf,
        axis1=_init_mapping(_rng(seed, 21), config, n1),
        axis2=_init_mapping(_rng(seed, 22), config, n2),
        hyper1=_init_hyper(_rng(seed, 31), config),
        hyper2=_init_hyper(_rng(seed, 32), config),
        core=_rng(seed, 40).normal(0.0, 1.0 / np.sqrt(n1 * n2), size=(n1, n2)),
        seed=seed,
    )


def _fourier_block(coords: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """[sin(2 pi B c), cos(2 pi B c)] for a batch of scalar coordinates."""
    angles = 2.0 * np.pi * np.outer(coords, basis)
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def crf_features(c, crf: CRFBundle) -> np.ndarray:
    """Concatenated Fourier features across all input scales.

    Accepts a scalar (returns a vector) or a 1-D batch (returns a matrix);
    block order is [sin_k, cos_k] per scale k.
    """
    coords = np.atleast_1d(np.asarray(c, dtype=np.float64))
    feats = np.concatenate(
        [_fourier_block(coords, basis) for basis in crf.input_bases], axis=1
    )
    return feats[0] if np.isscalar(c) or np.asarray(c).ndim == 0 else feats


@dataclass(frozen=True)
class AxisFeatures:
    """Precomputed coordinate features for one axis: they depend only on the
    coordinates and the fixed bases, so they are constants of the graph."""

    base: np.ndarray  # (N, feature_dim)
    per_layer: list[np.ndarray]  # L entries, (N, hidden)


def axis_features(coords: np.ndarray, crf: CRFBundle) -> AxisFeatures:
    coords = np.asarray(coords, dtype=np.float64)
    base = np.concatenate(
        [_fourier_block(coords, basis) for basis in crf.input_bases], axis=1
    )
    per_layer = [
        np.ascontiguousarray(_fourier_block(coords, basis) @ proj)
        for basis, proj in zip(crf.layer_bases, crf.layer_proj)
    ]
    return AxisFeatures(base=np.ascontiguousarray(base), per_layer=per_layer)


@dataclass
class MappingTensors:
    w_in: Tensor
    b_in: Tensor
    w_hid: list[Tensor]
    b_hid: list[Tensor]
    w_out: list[Tensor]
    b_out: list[Tensor]
    w_final: Tensor
    b_final: Tensor


@dataclass
class HyperTensors:
    w: list[Tensor]
    b: list[Tensor]


@dataclass
class ModelTensors:
    """Autodiff view over a parameter set, rebuilt per forward pass."""

    config: ModelConfig
    axis1: MappingTensors
    axis2: MappingTensors
    hyper1: HyperTensors
    hyper2: HyperTensors
    core: Tensor

    @classmethod
    def wrap(cls, params: ModelParams, requires_grad: bool) -> "ModelTensors":
        def t(a):
            return Tensor(a, requires_grad=requires_grad)

        def mapping(m):
            return MappingTensors(
                t(m.w_in),
                t(m.b_in),
                [t(w) for w in m.w_hid],
                [t(b) for b in m.b_hid],
                [t(w) for w in m.w_out],
                [t(b) for b in m.b_out],
                t(m.w_final),
                t(m.b_final),
            )

        def hyper(h):
            return HyperTensors([t(w) for w in h.w], [t(b) for b in h.b])

        return cls(
            config=params.config,
            axis1=mapping(params.axis1),
            axis2=mapping(params.axis2),
            hyper1=hyper(params.hyper1),
            hyper2=hyper(params.hyper2),
            core=t(params.core),
        )

    @classmethod
    def from_named(cls, config: ModelConfig, tensors: dict[str, Tensor]) -> "ModelTensors":
        """Rebuild the structured view from named tensors (gradcheck path)."""
        L = config.layers

        def mapping(prefix):
            return MappingTensors(
                w_in=tensors[f"{prefix}.w_in"],
                b_in=tensors[f"{prefix}.b_in"],
                w_hid=[tensors[f"{prefix}.w_hid.{i}"] for i in range(L)],
                b_hid=[tensors[f"{prefix}.b_hid.{i}"] for i in range(L)],
                w_out=[tensors[f"{prefix}.w_out.{i}"] for i in range(L)],
                b_out=[tensors[f"{prefix}.b_out.{i}"] for i in range(L)],
                w_final=tensors[f"{prefix}.w_final"],
                b_final=tensors[f"{prefix}.b_final"],
            )

        def hyper(prefix):
            return HyperTensors(
                w=[tensors[f"{prefix}.w.{i}"] for i in range(L + 1)],
                b=[tensors[f"{prefix}.b.{i}"] for i in range(L + 1)],
            )

        return cls(
            config=config,
            axis1=mapping("axis1"),
            axis2=mapping("axis2"),
            hyper1=hyper("hyper1"),
            hyper2=hyper("hyper2"),
            core=tensors["core"],
        )

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for axis_name in ("axis1", "axis2"):
            m: MappingTensors = getattr(self, axis_name)
            yield f"{axis_name}.w_in", m.w_in
            yield f"{axis_name}.b_in", m.b_in
            for i, (w, b) in enumerate(zip(m.w_hid, m.b_hid)):
                yield f"{axis_name}.w_hid.{i}", w
                yield f"{axis_name}.b_hid.{i}", b
            for i, (w, b) in enumerate(zip(m.w_out, m.b_out)):
                yield f"{axis_name}.w_out.{i}", w
                yield f"{axis_name}.b_out.{i}", b
            yield f"{axis_name}.w_final", m.w_final
            yield f"{axis_name}.b_final", m.b_final
        for hyper_name in ("hyper1", "hyper2"):
            h: HyperTensors = getattr(self, hyper_name)
            for i, (w, b) in enumerate(zip(h.w, h.b)):
                yield f"{hyper_name}.w.{i}", w
                yield f"{hyper_name}.b.{i}", b
        yield "core", self.core


def modulations_from_latent(phi: Tensor, hyper: HyperTensors) -> list[Tensor]:
    """Skip-accumulated modulation stack, affine in the latent code.

    Level 0 seeds the accumulator; levels 1..L emit the per-layer gates.
    """
    delta = ad.add(ad.matmul(phi, hyper.w[0]), hyper.b[0])
    mods = []
    for w, b in zip(hyper.w[1:], hyper.b[1:]):
        delta = ad.add(delta, ad.add(ad.matmul(phi, w), b))
        mods.append(delta)
    return mods


def mapping_forward(
    mt: MappingTensors, feats: AxisFeatures, mods: list[Tensor]
) -> Tensor:
    """One axis subnetwork over a batch of coordinates -> (N, axis_dim).

    ReLU stem on the input features, then L modulated sine layers with
    per-layer features added to the pre-activation; the output sums ReLU
    heads of hidden states 1..L and a final linear head of state L+1.
    """
    if len(mods) != len(mt.w_hid):
        raise DimensionError(
            f"got {len(mods)} modulations for {len(mt.w_hid)} sine layers"
        )
    h = ad.relu(ad.add(ad.matmul(Tensor(feats.base), mt.w_in), mt.b_in))
    out = None
    for w, b, w_out, b_out, gamma, mod in zip(
        mt.w_hid, mt.b_hid, mt.w_out, mt.b_out, feats.per_layer, mods
    ):
        head = ad.relu(ad.add(ad.matmul(h, w_out), b_out))
        out = head if out is None else ad.add(out, head)
        pre = ad.add(ad.add(ad.matmul(h, w), b), Tensor(gamma))
        h = ad.mul(mod, ad.sin(pre))
    return ad.add(out, ad.add(ad.matmul(h, mt.w_final), mt.b_final))


def grid_forward(
    mt: ModelTensors, row_feats: AxisFeatures, col_feats: AxisFeatures, phi: Tensor
) -> Tensor:
    """Factorized forward over a full grid: ``U C V^T`` of shape (R, m)."""
    u = mapping_forward(mt.axis1, row_feats, modulations_from_latent(phi, mt.hyper1))
    v = mapping_forward(mt.axis2, col_feats, modulations_from_latent(phi, mt.hyper2))
    return ad.matmul(ad.matmul(u, mt.core), ad.transpose(v))


def _as_latent_row(phi, latent_dim: int) -> np.ndarray:
    arr = np.asarray(phi, dtype=np.float64).reshape(1, -1)
    if arr.shape[1] != latent_dim:
        raise DimensionError(f"latent code of length {arr.shape[1]}, expected {latent_dim}")
    return arr


def axis_eval(params: ModelParams, phi, coords, axis: int) -> np.ndarray:
    """Evaluate one axis subnetwork outside any tape -> (N, axis_dim)."""
    if axis not in (1, 2):
        raise ContractError("axis must be 1 or 2")
    mt = ModelTensors.wrap(params, requires_grad=False)
    mapping = mt.axis1 if axis == 1 else mt.axis2
    hyper = mt.hyper1 if axis == 1 else mt.hyper2
    feats = axis_features(np.atleast_1d(np.asarray(coords, dtype=np.float64)), params.crf)
    phi_t = Tensor(_as_latent_row(phi, params.config.latent_dim))
    return mapping_forward(mapping, feats, modulations_from_latent(phi_t, hyper)).data


def factorized_forward(c1: float, c2: float, phi, params: ModelParams) -> float:
    """Scalar evaluation ``u(c1)^T C v(c2)`` for one coordinate pair."""
    u = axis_eval(params, phi, [c1], axis=1)
    v = axis_eval(params, phi, [c2], axis=2)
    return float((u @ params.core @ v.T)[0, 0])


def lipschitz_bound(
    params: ModelParams, latent_radius: float = 1.0, max_coord: float = 1.0
) -> float:
    """Analytic Lipschitz constant of the factorized output in either
    coordinate: ``lam * eps^(2L) * xi^(4L+2) * eta^(2L) * nu``.

    ``eps = 1`` is the sine Lipschitz constant, ``xi`` the largest entrywise
    l1-norm over mapping weight matrices, ``lam`` the entrywise l1-norm of the
    core, ``eta`` a bound on modulation magnitudes for latent codes inside the
    given radius, and ``nu`` the largest coordinate magnitude. Loose by
    construction; it upper-bounds sampled difference quotients.
    """
    lam = float(np.abs(params.core).sum())
    xi = 0.0
    for m in (params.axis1, params.axis2):
        for w in [m.w_in, *m.w_hid, *m.w_out, m.w_final]:
            xi = max(xi, float(np.abs(w).sum()))
    eta = 0.0
    for h in (params.hyper1, params.hyper2):
        bound = 0.0
        for w, b in zip(h.w, h.b):
            bound += float(np.abs(w).sum(axis=0).max()) * latent_radius
            bound += float(np.abs(b).max())
            eta = max(eta, bound)
    L = params.config.layers
    return lam * xi ** (4 * L + 2) * eta ** (2 * L) * max_coord
