"""Meta-trainer: loss oracle, inner/outer loops, Adam, determinism, imputation."""

import hashlib

import numpy as np
import pytest
from _oracles import fd_grad, rel_err

from metainr.autodiff import Tape, Tensor
from metainr.data import SynthFamilyConfig, TimeSeriesInstance, synth_generate
from metainr.embedding import inverse_embed
from metainr.errors import ContractError
from metainr.model import ModelConfig, ModelTensors, init_params
from metainr.trainer import (
    AdamState,
    TrainConfig,
    adam_step,
    decode_series,
    impute,
    infer_adapt,
    inner_adapt,
    instance_loss,
    latent_interpolate,
    outer_step,
    prepare_instance,
    train,
)

TINY_MODEL = ModelConfig(
    layers=2,
    hidden=10,
    feat_per_scale=8,
    input_scales=(0.5, 2.0, 6.0),
    layer_scales=(3.0, 1.0),
    axis_dims=(4, 4),
    latent_dim=6,
)
TINY_TRAIN = TrainConfig(embed_dim=4, batch_size=4, epochs=2, model=TINY_MODEL, seed=0)


def toy_instance(seed=0, n=24, observed=0.6, sid="t0"):
    rng = np.random.default_rng(seed)
    t = np.cumsum(rng.uniform(0.5, 1.5, size=n))
    values = np.sin(2 * np.pi * 2.0 * t / t[-1]) + 0.1 * rng.normal(size=n)
    mask = (rng.uniform(size=n) < observed).astype(np.int8)
    if mask.sum() == 0:
        mask[0] = 1
    return TimeSeriesInstance(id=sid, city="c", timestamps=t, values=values, mask=mask)


def params_hash(params):
    h = hashlib.sha256()
    for _, arr in params.named_arrays():
        h.update(arr.tobytes())
    return h.hexdigest()


def loss_value(prep, phi, params, tv_weight):
    mt = ModelTensors.wrap(params, requires_grad=False)
    return instance_loss(prep, Tensor(np.asarray(phi).reshape(1, -1)), mt, tv_weight).item()


class TestInstanceLoss:
    def test_tape_free_recomputation_oracle(self):
        """Graph loss equals an independent numpy reimplementation."""
        params = init_params(TINY_MODEL, seed=3)
        inst = toy_instance(seed=1)
        prep = prepare_instance(inst, TINY_TRAIN, params)
        rng = np.random.default_rng(2)
        phi = rng.normal(size=(1, TINY_MODEL.latent_dim)) * 0.5
        got = loss_value(prep, phi, params, tv_weight=1e-2)

        # oracle: plain numpy forward, no autodiff machinery
        def axis(mapping, hyper, feats):
            mods, delta = [], phi @ hyper.w[0] + hyper.b[0]
            for w, b in zip(hyper.w[1:], hyper.b[1:]):
                delta = delta + phi @ w + b
                mods.append(delta)
            h = np.maximum(feats.base @ mapping.w_in + mapping.b_in, 0.0)
            out = None
            for w, b, w_out, b_out, gamma, mod in zip(
                mapping.w_hid,
                mapping.b_hid,
                mapping.w_out,
                mapping.b_out,
                feats.per_layer,
                mods,
            ):
                head = np.maximum(h @ w_out + b_out, 0.0)
                out = head if out is None else out + head
                h = mod * np.sin(h @ w + b + gamma)
            return out + h @ mapping.w_final + mapping.b_final

        u = axis(params.axis1, params.hyper1, prep.row_feats)
        v = axis(params.axis2, params.hyper2, prep.col_feats)
        pred = u @ params.core @ v.T
        mask = prep.grid.cell_mask
        data = np.sum(mask * (pred - prep.grid.cell_values) ** 2) / mask.sum()
        series = inverse_embed(pred, prep.delay, len(inst))
        tv = np.mean(np.diff(series) ** 2)
        assert got == pytest.approx(data + 1e-2 * tv, abs=1e-12)

    def test_constant_observed_series_zero_loss_with_zero_core(self):
        """Constant observations normalize to zero labels; a zero core
        predicts zero everywhere, so both loss terms vanish."""
        params = init_params(TINY_MODEL, seed=0)
        params.core[...] = 0.0
        values = np.full(12, 7.5)
        values[5] = 99.0  # hidden outlier, must not affect the loss
        mask = np.ones(12, dtype=np.int8)
        mask[5] = 0
        inst = TimeSeriesInstance(
            id="const", city="c", timestamps=np.arange(12.0), values=values, mask=mask
        )
        prep = prepare_instance(inst, TINY_TRAIN, params)
        assert loss_value(prep, np.zeros(TINY_MODEL.latent_dim), params, 1e-4) == 0.0

    def test_single_observed_cell(self):
        params = init_params(TINY_MODEL, seed=4)
        config = TrainConfig(embed_dim=1, tv_weight=0.0, model=TINY_MODEL, seed=0)
        mask = np.zeros(6, dtype=np.int8)
        mask[2] = 1
        inst = TimeSeriesInstance(
            id="one",
            city="c",
            timestamps=np.arange(6.0),
            values=np.array([0.0, 0.0, 4.0, 0.0, 0.0, 0.0]),
            mask=mask,
        )
        prep = prepare_instance(inst, config, params)
        assert prep.n_observed_cells == 1
        phi = np.zeros(TINY_MODEL.latent_dim)
        mt = ModelTensors.wrap(params, requires_grad=False)
        from metainr.model import grid_forward

        pred = grid_forward(
            mt, prep.row_feats, prep.col_feats, Tensor(phi.reshape(1, -1))
        ).data
        y = prep.grid.cell_values[2, 0]
        assert loss_value(prep, phi, params, 0.0) == pytest.approx(
            (y - pred[2, 0]) ** 2, rel=1e-12
        )


class TestInnerAdapt:
    def test_zero_learning_rate(self):
        params = init_params(TINY_MODEL, seed=5)
        config = TrainConfig(
            inner_lr=0.0, inner_steps=4, embed_dim=4, model=TINY_MODEL, seed=0
        )
        prep = prepare_instance(toy_instance(2), config, params)
        np.testing.assert_array_equal(
            inner_adapt(prep, params, config), np.zeros((1, TINY_MODEL.latent_dim))
        )

    def test_single_step_matches_fd_gradient(self):
        params = init_params(TINY_MODEL, seed=6)
        config = TrainConfig(
            inner_lr=0.05, inner_steps=1, embed_dim=4, tv_weight=1e-3,
            model=TINY_MODEL, seed=0,
        )
        prep = prepare_instance(toy_instance(3), config, params)
        phi0 = np.zeros((1, TINY_MODEL.latent_dim))
        fd = fd_grad(lambda: loss_value(prep, phi0, params, config.tv_weight), phi0)
        got = inner_adapt(prep, params, config)
        assert rel_err(got, -config.inner_lr * fd).max() <= 1e-4

    def test_adaptation_does_not_increase_loss(self):
        params = init_params(TINY_MODEL, seed=7)
        config = TrainConfig(embed_dim=4, model=TINY_MODEL, seed=0)
        improved = 0
        for i in range(100):
            prep = prepare_instance(toy_instance(100 + i, sid=f"s{i}"), config, params)
            before = loss_value(prep, np.zeros(TINY_MODEL.latent_dim), params, config.tv_weight)
            after = loss_value(prep, inner_adapt(prep, params, config), params, config.tv_weight)
            improved += after <= before
        assert improved >= 95


class TestAdam:
    def test_closed_form_single_step(self):
        params = init_params(TINY_MODEL, seed=8)
        before = {n: a.copy() for n, a in params.named_arrays()}
        grads = {
            n: np.random.default_rng(9).normal(size=a.shape)
            for n, a in params.named_arrays()
        }
        state = AdamState.init(params)
        adam_step(state, params, grads, lr=0.01)
        for name, arr in params.named_arrays():
            g = grads[name]
            m_hat = (0.1 * g) / (1 - 0.9)
            v_hat = (0.001 * g**2) / (1 - 0.999)
            expected = before[name] - 0.01 * m_hat / (np.sqrt(v_hat) + 1e-8)
            np.testing.assert_allclose(arr, expected, rtol=1e-12)

    def test_two_steps_track_reference(self):
        params = init_params(TINY_MODEL, seed=10)
        rng = np.random.default_rng(11)
        grads = [
            {n: rng.normal(size=a.shape) for n, a in params.named_arrays()}
            for _ in range(2)
        ]
        ref = {n: a.copy() for n, a in params.named_arrays()}
        m = {n: np.zeros_like(a) for n, a in ref.items()}
        v = {n: np.zeros_like(a) for n, a in ref.items()}
        for t, g in enumerate(grads, start=1):
            for n in ref:
                m[n] = 0.9 * m[n] + 0.1 * g[n]
                v[n] = 0.999 * v[n] + 0.001 * g[n] ** 2
                ref[n] -= 0.02 * (m[n] / (1 - 0.9**t)) / (
                    np.sqrt(v[n] / (1 - 0.999**t)) + 1e-8
                )
        state = AdamState.init(params)
        for g in grads:
            adam_step(state, params, g, lr=0.02)
        for name, arr in params.named_arrays():
            np.testing.assert_allclose(arr, ref[name], rtol=1e-11)


class TestOuterStep:
    def test_zero_outer_lr_keeps_params(self):
        params = init_params(TINY_MODEL, seed=12)
        config = TrainConfig(outer_lr=0.0, embed_dim=4, model=TINY_MODEL, seed=0)
        prep = prepare_instance(toy_instance(5), config, params)
        before = params_hash(params)
        outer_step([prep], params, AdamState.init(params), config)
        assert params_hash(params) == before

    def test_empty_batch_rejected(self):
        params = init_params(TINY_MODEL, seed=12)
        with pytest.raises(ContractError):
            outer_step([], params, AdamState.init(params), TINY_TRAIN)

    def test_outer_gradient_matches_fd_with_frozen_codes(self):
        """First-order contract: with adapted codes frozen, the accumulated
        gradient equals central differences of the batch-mean loss."""
        cfg_model = ModelConfig(
            layers=1,
            hidden=6,
            feat_per_scale=4,
            input_scales=(1.0, 4.0),
            layer_scales=(2.0,),
            axis_dims=(3, 3),
            latent_dim=4,
        )
        config = TrainConfig(embed_dim=3, tv_weight=1e-3, model=cfg_model, seed=0)
        params = init_params(cfg_model, seed=13)
        preps = [
            prepare_instance(toy_instance(20 + i, n=12, sid=f"b{i}"), config, params)
            for i in range(2)
        ]
        phis = [inner_adapt(p, params, config) for p in preps]

        mt = ModelTensors.wrap(params, requires_grad=True)
        for prep, phi in zip(preps, phis):
            with Tape() as tape:
                loss = instance_loss(prep, Tensor(phi), mt, config.tv_weight)
            tape.backward(loss, seed=1.0 / len(preps))
        grads = {n: t.grad for n, t in mt.named()}

        def batch_loss():
            return float(
                np.mean(
                    [
                        loss_value(p, phi, params, config.tv_weight)
                        for p, phi in zip(preps, phis)
                    ]
                )
            )

        worst = 0.0
        for name, arr in params.named_arrays():
            fd = fd_grad(batch_loss, arr)
            got = grads[name] if grads[name] is not None else np.zeros_like(arr)
            worst = max(worst, rel_err(got, fd).max())
        assert worst <= 1e-4


class TestTrain:
    def dataset(self, n=6):
        return [toy_instance(40 + i, n=30, sid=f"d{i}") for i in range(n)]

    def test_zero_epochs_returns_initial_params(self):
        config = TrainConfig(epochs=0, embed_dim=4, model=TINY_MODEL, seed=3)
        result = train(self.dataset(), config)
        assert result.history == []
        assert params_hash(result.final.params) == params_hash(init_params(TINY_MODEL, 3))

    def test_loss_descends(self):
        config = TrainConfig(
            epochs=5, batch_size=3, embed_dim=4, inner_steps=2, model=TINY_MODEL, seed=0
        )
        result = train(self.dataset(), config)
        assert result.history[-1]["train_loss"] < result.history[0]["train_loss"]

    def test_seed_determinism(self):
        config = TrainConfig(epochs=2, batch_size=3, embed_dim=4, model=TINY_MODEL, seed=1)
        r1 = train(self.dataset(), config)
        r2 = train(self.dataset(), config)
        assert r1.history == r2.history
        assert params_hash(r1.final.params) == params_hash(r2.final.params)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ContractError):
            train([], TINY_TRAIN)


class TestInference:
    def trained(self):
        config = TrainConfig(
            epochs=3, batch_size=3, embed_dim=4, model=TINY_MODEL, seed=2
        )
        return train([toy_instance(60 + i, n=30, sid=f"i{i}") for i in range(6)], config).final

    def test_infer_adapt_never_mutates_checkpoint(self):
        ckpt = self.trained()
        before = params_hash(ckpt.params)
        infer_adapt(toy_instance(99, n=30), ckpt.params, ckpt.train_config, steps=5)
        assert params_hash(ckpt.params) == before

    def test_zero_steps_equals_zero_latent_decode(self):
        ckpt = self.trained()
        inst = toy_instance(98, n=30)
        phi, pred = infer_adapt(
            inst, ckpt.params, ckpt.train_config, steps=0, overwrite_observed=False
        )
        np.testing.assert_array_equal(phi, np.zeros_like(phi))
        prep = prepare_instance(inst, ckpt.train_config, ckpt.params)
        np.testing.assert_array_equal(pred, decode_series(phi, prep, ckpt.params))

    def test_impute_overwrite_flag(self):
        ckpt = self.trained()
        inst = toy_instance(97, n=30, observed=1.0)
        phi, pred = infer_adapt(inst, ckpt.params, ckpt.train_config)
        np.testing.assert_array_equal(pred, inst.values)  # fully observed, overwritten
        raw = impute(inst, phi, ckpt.params, ckpt.train_config, overwrite_observed=False)
        assert not np.array_equal(raw, inst.values)
        assert np.isfinite(raw).all()

    def test_pipeline_consistency_perfect_grid(self):
        """If grid predictions equal the embedded normalized labels, the
        decode path reproduces the fully observed series exactly."""
        params = init_params(TINY_MODEL, seed=14)
        config = TrainConfig(embed_dim=5, model=TINY_MODEL, seed=0)
        inst = toy_instance(96, n=25, observed=1.0)
        prep = prepare_instance(inst, config, params)
        series = inverse_embed(prep.grid.cell_values, prep.delay, len(inst))
        from metainr.data import denormalize

        np.testing.assert_allclose(
            denormalize(series, prep.stats), inst.values, atol=1e-10
        )

    def test_latent_interpolation_endpoints(self):
        ckpt = self.trained()
        inst = toy_instance(95, n=30)
        prep = prepare_instance(inst, ckpt.train_config, ckpt.params)
        rng = np.random.default_rng(15)
        phi1 = rng.normal(size=TINY_MODEL.latent_dim)
        phi2 = rng.normal(size=TINY_MODEL.latent_dim)
        np.testing.assert_array_equal(
            latent_interpolate(phi1, phi2, 1.0, prep, ckpt.params),
            decode_series(phi1, prep, ckpt.params),
        )
        np.testing.assert_array_equal(
            latent_interpolate(phi1, phi2, 0.0, prep, ckpt.params),
            decode_series(phi2, prep, ckpt.params),
        )
        np.testing.assert_array_equal(
            latent_interpolate(phi1, phi1, 0.5, prep, ckpt.params),
            decode_series(phi1, prep, ckpt.params),
        )
        with pytest.raises(ContractError):
            latent_interpolate(phi1, phi2, 1.5, prep, ckpt.params)
