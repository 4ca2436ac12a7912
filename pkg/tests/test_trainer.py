"""Local device update: graph construction, step semantics and failure reporting."""

from dataclasses import replace

import numpy as np
import pytest

from helpers import FD_RTOL, numeric_grad, rel_error
from tappfl.fl import Architecture, FLConfig, device_rng, init_federation
from tappfl.nn import autodiff as ad
from tappfl.nn.autodiff import GradTape
from tappfl.nn.network import DimensionError, apply_sgd, forward, init_net
from tappfl.nn.tensor import params_digest
from tappfl.objectives import jsd_mi_estimate
from tappfl.trainer import (
    DeviceModel,
    DeviceShard,
    NumericError,
    _one_hot,
    batch_objective,
    critic_batch,
    device_losses,
    device_update,
    extract_representations,
    minibatches,
)

SMALL = Architecture(theta_hidden=(5, 3), psi_hidden=(4,), omega_hidden=(6,))


def _setup(lam=0.5, n=24, d=4, seed=0, **cfg_kw):
    cfg = FLConfig(num_devices=1, rho=1.0, rounds=1, local_epochs=2, batch_size=8, lambdas=(lam,), seed=seed,
                   lr_psi=0.05, lr_omega=0.05, lr_theta=0.05, **cfg_kw)
    _, devices = init_federation(cfg, SMALL, d, 2)
    rng = np.random.default_rng(seed)
    shard = DeviceShard(rng.standard_normal((n, d)), rng.integers(0, 2, n), 2)
    return cfg, devices[0], shard


def _digests(model):
    return {k: params_digest(getattr(model, k).params()) for k in ("theta", "psi", "omega")}


class TestShard:
    def test_no_label_field(self):
        names = {f for f in DeviceShard.__dataclass_fields__}
        assert names == {"x", "u", "attribute_arity"}

    def test_attribute_range(self):
        with pytest.raises(ValueError):
            DeviceShard(np.zeros((2, 3)), np.array([0, 2]), 2)

    def test_empty(self):
        with pytest.raises(ValueError):
            DeviceShard(np.zeros((0, 3)), np.zeros(0, dtype=int), 2)


class TestMinibatches:
    def test_trailing_singleton_dropped(self):
        batches = minibatches(21, 10, np.random.default_rng(0))
        assert [len(b) for b in batches] == [10, 10]

    def test_cover_without_repeats(self):
        batches = minibatches(23, 10, np.random.default_rng(0))
        joined = np.concatenate(batches)
        assert sorted(joined.tolist()) == list(range(23))

    def test_same_stream_same_order(self):
        a = minibatches(50, 7, device_rng(3, 1, 4))
        b = minibatches(50, 7, device_rng(3, 1, 4))
        assert all(np.array_equal(x, y) for x, y in zip(a, b))


class TestGraph:
    @pytest.mark.parametrize("lam", [0.0, 0.3, 1.0])
    def test_single_graph_matches_separate_branches(self, lam):
        cfg, model, shard = _setup(lam)
        model = replace(model, lam=lam)
        x, u = shard.x[:6], shard.u[:6]
        t1 = GradTape()
        g1 = t1.backward(batch_objective(model, x, u, t1).total)
        t2 = GradTape()
        lt, lp, lo = device_losses(model, x, u, t2)
        g2 = t2.backward(ad.add(ad.add(lt, lp), lo))
        for net in (model.theta, model.psi, model.omega):
            for p in net.params():
                assert np.max(np.abs(g1.get(p, 0) - g2.get(p, 0))) <= 1e-12

    @pytest.mark.parametrize("lam", [0.0, 0.5, 1.0])
    def test_branch_gradients_match_finite_differences(self, lam):
        _, model, shard = _setup(lam)
        model = replace(model, lam=lam)
        x, u = shard.x[:5], shard.u[:5]
        tape = GradTape()
        lt, lp, lo = device_losses(model, x, u, tape)
        grads = tape.backward(ad.add(ad.add(lt, lp), lo))

        def value(which):
            losses = device_losses(model, x, u, GradTape())
            return ad.value_of(losses[which])

        for which, net in ((0, model.theta), (1, model.psi), (2, model.omega)):
            for p in net.params():
                num = numeric_grad(lambda: value(which), p)
                assert rel_error(grads.get(p, np.zeros(p.shape)), num) < FD_RTOL, (which, p.name)

    def test_extractor_loss_does_not_reach_heads(self):
        _, model, shard = _setup(0.5)
        tape = GradTape()
        lt, _, _ = device_losses(model, shard.x[:6], shard.u[:6], tape)
        grads = tape.backward(lt)
        for p in (*model.psi.params(), *model.omega.params()):
            assert not np.any(grads.get(p, np.zeros(1)))

    def test_adversary_loss_does_not_reach_critic(self):
        _, model, shard = _setup(0.5)
        tape = GradTape()
        _, lp, _ = device_losses(model, shard.x[:6], shard.u[:6], tape)
        grads = tape.backward(lp)
        for p in (*model.omega.params(), *model.theta.params()):
            assert not np.any(grads.get(p, np.zeros(1)))

    def test_negative_pairing_is_cyclic_shift(self):
        _, model, shard = _setup()
        x = shard.x[:4]
        r = forward(model.theta, x)
        onehot = _one_hot(shard.u[:4], 2)
        batch = critic_batch(model.omega, x, r, onehot)
        expected = forward(model.omega, np.hstack([np.roll(x, -1, axis=0), r, onehot]))[:, 0]
        np.testing.assert_array_equal(ad.value_of(batch.neg_scores).reshape(-1), expected)


class TestDeviceUpdate:
    def test_zero_learning_rates_freeze_everything(self):
        cfg, model, shard = _setup(0.5)
        cfg = replace(cfg, lr_psi=0.0, lr_omega=0.0, lr_theta=0.0)
        new, summary = device_update(model, shard, cfg, np.random.default_rng(0))
        assert _digests(new) == _digests(model)
        assert len(summary.ce_loss) == cfg.local_epochs and np.all(np.isfinite(summary.ce_loss))

    def test_lambda_zero_matches_utility_only_loop(self):
        cfg, model, shard = _setup(0.0)
        new, _ = device_update(model, shard, cfg, device_rng(0, 0, 0))
        theta, omega = model.theta, model.omega
        rng = device_rng(0, 0, 0)
        for _ in range(cfg.local_epochs):
            for idx in minibatches(len(shard), cfg.batch_size, rng):
                x, u = shard.x[idx], shard.u[idx]
                tape = GradTape()
                r = forward(theta, x, tape)
                mi = jsd_mi_estimate(critic_batch(omega, x, r, _one_hot(u, 2), tape))
                grads = tape.backward(ad.neg(mi))
                theta, omega = apply_sgd(theta, grads, cfg.lr_theta), apply_sgd(omega, grads, cfg.lr_omega)
        assert params_digest(new.theta.params()) == params_digest(theta.params())
        assert params_digest(new.omega.params()) == params_digest(omega.params())

    def test_single_step_matches_finite_difference_oracle(self):
        # 2 -> 2 -> 1 extractor, one batch, one epoch
        arch = Architecture(theta_hidden=(2, 1), theta_activations=("relu", "sigmoid"), psi_hidden=(2,),
                            omega_hidden=(2,))
        cfg = FLConfig(num_devices=1, rho=1.0, local_epochs=1, batch_size=4, lambdas=(0.4,), lr_psi=0.1,
                       lr_omega=0.2, lr_theta=0.3)
        _, (model,) = init_federation(cfg, arch, 2, 2)
        x = np.array([[0.5, -1.0], [1.5, 0.25], [-0.75, 0.8], [0.1, 0.3]])
        shard = DeviceShard(x, np.array([0, 1, 1, 0]), 2)
        new, _ = device_update(model, shard, cfg, np.random.default_rng(0))
        order = minibatches(4, 4, np.random.default_rng(0))[0]
        xb, ub = x[order], shard.u[order]
        for which, name, lr in ((0, "theta", 0.3), (1, "psi", 0.1), (2, "omega", 0.2)):
            for old, upd in zip(getattr(model, name).params(), getattr(new, name).params()):
                num = numeric_grad(lambda: ad.value_of(device_losses(model, xb, ub, GradTape())[which]), old)
                np.testing.assert_allclose(upd.value, old.value - lr * num, rtol=0, atol=1e-9)

    def test_adversary_trains_at_lambda_zero(self):
        cfg, model, shard = _setup(0.0)
        new, _ = device_update(model, shard, cfg, np.random.default_rng(1))
        assert params_digest(new.psi.params()) != params_digest(model.psi.params())

    def test_critic_frozen_when_its_rate_is_zero(self):
        cfg, model, shard = _setup(1.0)
        new, _ = device_update(model, shard, replace(cfg, lr_omega=0.0), np.random.default_rng(1))
        assert params_digest(new.omega.params()) == params_digest(model.omega.params())

    def test_first_order_ascent_of_adversary_loss(self):
        cfg, model, shard = _setup(1.0)
        cfg = replace(cfg, lr_psi=0.0, lr_omega=0.0, lr_theta=1e-6, local_epochs=1, batch_size=len(shard))
        x, u = shard.x, shard.u
        before = batch_objective(model, x, u, GradTape()).ce
        new, _ = device_update(model, shard, cfg, np.random.default_rng(0))
        after = batch_objective(new, x, u, GradTape()).ce
        assert after >= before - 1e-12

    def test_sequential_refresh_differs_but_stays_finite(self):
        cfg, model, shard = _setup(0.5)
        a, _ = device_update(model, shard, cfg, np.random.default_rng(2))
        b, s = device_update(model, shard, replace(cfg, sequential_refresh=True), np.random.default_rng(2))
        assert params_digest(a.theta.params()) != params_digest(b.theta.params())
        assert np.all(np.isfinite(s.ce_loss))

    def test_deterministic(self):
        cfg, model, shard = _setup(0.5)
        a, sa = device_update(model, shard, cfg, device_rng(5, 0, 2))
        b, sb = device_update(model, shard, cfg, device_rng(5, 0, 2))
        assert _digests(a) == _digests(b) and sa.ce_loss == sb.ce_loss

    def test_divergence_reports_location(self):
        cfg, model, shard = _setup(0.5)
        cfg = replace(cfg, lr_theta=1e200, lr_omega=1e200, lr_psi=1e200)
        with np.errstate(all="ignore"), pytest.raises(NumericError, match=r"device 0, epoch \d+, batch \d+"):
            device_update(model, shard, cfg, np.random.default_rng(0))

    def test_width_mismatch(self):
        cfg, model, _ = _setup(0.5)
        bad = DeviceShard(np.zeros((4, 7)), np.array([0, 1, 0, 1]), 2)
        with pytest.raises(DimensionError):
            device_update(model, bad, cfg, np.random.default_rng(0))

    def test_shard_of_one(self):
        cfg, model, _ = _setup(0.5)
        with pytest.raises(ValueError):
            device_update(model, DeviceShard(np.zeros((1, 4)), np.array([0]), 2), cfg, np.random.default_rng(0))


class TestExtract:
    def test_matches_forward(self):
        _, model, shard = _setup()
        np.testing.assert_array_equal(extract_representations(model, shard.x), forward(model.theta, shard.x))

    def test_identity_layer(self):
        from tappfl.nn.network import DenseNet, Layer
        from tappfl.nn.tensor import ParamTensor

        theta = DenseNet((Layer(ParamTensor.from_array(np.eye(3), "w"), ParamTensor.from_array(np.zeros(3), "b"),
                                "identity"),), 3)
        psi = init_net([3, 2], ["identity"], seed=0)
        omega = init_net([3 + 3 + 2, 1], ["identity"], seed=0)
        model = DeviceModel(theta, psi, omega, 0.5, 0)
        x = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(extract_representations(model, x), x)
