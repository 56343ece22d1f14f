import dataclasses

import numpy as np
import pytest

from dmat import tensor as T
from dmat.config import Schedule, apply_ablations, full_config
from dmat.data import synth_dataset
from dmat.losses import FeatureExtractor, PatchDiscriminator, generator_losses
from dmat.model import Generator
from dmat.tensor import ContractError, Tensor
from dmat.train import (
    MAGIC,
    ConfigMismatchError,
    NonFiniteLossError,
    TrainState,
    batch_indices,
    load_checkpoint,
    lr_at,
    predict,
    read_checkpoint,
    save_checkpoint,
    train,
    train_step,
)

from tiny import tiny_config

REFERENCE_PARAMS = 12.02e6


@pytest.fixture(scope="module")
def data():
    return synth_dataset(tiny_config().data)


class TestSchedule:
    @pytest.mark.parametrize(
        "it,lr",
        [(0, 1e-2), (999, 1e-2), (1000, 1e-3), (19999, 1e-3), (20000, 2e-4), (60000, 1e-4), (150000, 5e-5), (10**9, 5e-5)],
    )
    def test_boundaries(self, it, lr):
        assert lr_at(Schedule(), it) == lr

    def test_negative_iteration(self):
        with pytest.raises(ValueError):
            lr_at(Schedule(), -1)


def test_batch_indices_cover_each_epoch():
    seen = [i for it in range(3) for i in batch_indices(6, 2, it, 0)]
    assert sorted(seen) == list(range(6))
    assert batch_indices(6, 4, 5, 1) == batch_indices(6, 4, 5, 1)


class TestEma:
    def test_scalar_recurrence(self, data):
        cfg = tiny_config(ema_rate=0.3)
        state = TrainState.create(cfg, 0)
        name, p = next(iter(state.gen.named_parameters()))
        shadow = float(p.data.flat[0])
        rng = np.random.default_rng(0)
        for _ in range(10):
            for q in state.gen.parameters():
                q.data += rng.normal(size=q.shape).astype(q.dtype) * 0.1
            state.ema_update()
            shadow = (1 - 0.3) * shadow + 0.3 * float(p.data.flat[0])
        assert abs(float(state.ema_shadow[name].flat[0]) - shadow) < 1e-7

    def test_constant_params_fixed_point(self):
        state = TrainState.create(tiny_config(ema_rate=0.5), 0)
        for _ in range(5):
            state.ema_update()
        for k, p in state.gen.named_parameters():
            assert np.array_equal(state.ema_shadow[k], p.data)

    def test_apply_restore_identity_and_contract(self):
        state = TrainState.create(tiny_config(), 0)
        before = state.gen.state_dict()
        for k in state.ema_shadow:
            state.ema_shadow[k] = state.ema_shadow[k] + 1.0
        state.ema_apply()
        with pytest.raises(ContractError):
            state.ema_apply()
        k0 = next(iter(before))
        assert np.array_equal(dict(state.gen.named_parameters())[k0].data, before[k0] + 1.0)
        state.ema_restore()
        for k, v in state.gen.state_dict().items():
            assert np.array_equal(v, before[k])
        with pytest.raises(ContractError):
            state.ema_restore()


class TestStep:
    def test_metrics_and_iteration(self, data):
        state = TrainState.create(tiny_config(), 0)
        m = train_step(state, data[:2], FeatureExtractor(state.cfg.features))
        assert state.iteration == 1
        assert set(m) == {"iter", "lr", "l1", "adv_g", "adv_d", "perc", "style", "total"}
        assert m["lr"] == 1e-2 and m["adv_d"] > 0

    def test_bitwise_determinism(self, data):
        runs = []
        for _ in range(2):
            state = TrainState.create(tiny_config(), 3)
            hist = train(state, data, 3, FeatureExtractor(state.cfg.features))
            runs.append((hist, state.gen.state_dict(), state.disc.state_dict()))
        assert runs[0][0] == runs[1][0]
        for a, b in zip(runs[0][1:], runs[1][1:]):
            assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_disc_gets_no_generator_gradient(self, data):
        state = TrainState.create(tiny_config(), 0)
        cfg = state.cfg
        from dmat.data import collate

        clean, occluded, masks = collate(data[:2])
        x_hat = state.gen(occluded, masks)
        for p in state.disc.parameters():
            p.requires_grad = False
        gen_loss, _ = generator_losses(x_hat, clean, masks.amodal, FeatureExtractor(cfg.features), cfg.loss, state.disc)
        T.backward(gen_loss)
        assert all(p.grad is None for p in state.disc.parameters())
        assert any(p.grad is not None and np.abs(p.grad).sum() > 0 for p in state.gen.parameters())

    def test_step_leaves_no_stale_disc_gradient(self, data):
        state = TrainState.create(tiny_config(), 0)
        train_step(state, data[:2], FeatureExtractor(state.cfg.features))
        assert all(p.grad is None for p in state.disc.parameters())
        assert all(p.grad is None for p in state.gen.parameters())

    def test_gan_off_leaves_disc_untouched(self, data):
        state = TrainState.create(apply_ablations(tiny_config(), "no-gan"), 0)
        before = state.disc.state_dict()
        m = train_step(state, data[:2], FeatureExtractor(state.cfg.features))
        assert m["adv_g"] == 0.0 and m["adv_d"] == 0.0
        assert all(np.array_equal(v, before[k]) for k, v in state.disc.state_dict().items())

    def test_non_finite_loss_names_component(self, data):
        state = TrainState.create(tiny_config(), 0)
        bad = [dataclasses.replace(data[0], clean=np.full_like(data[0].clean, np.nan)), data[1]]
        with pytest.raises(NonFiniteLossError, match="iteration 0") as exc:
            train_step(state, bad, FeatureExtractor(state.cfg.features))
        assert exc.value.iteration == 0 and exc.value.component

    def test_no_nan_after_training(self, data):
        state = TrainState.create(tiny_config(), 1)
        train(state, data, 4, FeatureExtractor(state.cfg.features))
        assert all(np.isfinite(p.data).all() for p in state.gen.parameters() + state.disc.parameters())
        assert all(state.ema_shadow[k].shape == p.shape for k, p in state.gen.named_parameters())

    def test_predict_shape_and_range(self, data):
        state = TrainState.create(tiny_config(), 0)
        out = predict(state.gen, data, batch=4)
        assert out.shape == (6, 3, 32, 32) and np.abs(out).max() <= 1


class TestCheckpoint:
    def test_format(self, tmp_path):
        state = TrainState.create(tiny_config(), 0)
        save_checkpoint(tmp_path / "c.dmat", state)
        raw = (tmp_path / "c.dmat").read_bytes()
        assert raw[:8] == MAGIC
        header, arrays = read_checkpoint(tmp_path / "c.dmat")
        assert header["config_hash"] == state.cfg.config_hash() and header["iteration"] == 0
        assert all(a.dtype == np.float32 for a in arrays.values())
        assert any(k.startswith("ema/") for k in arrays) and any(k.startswith("adam_m/disc/") for k in arrays)

    def test_resume_equivalence(self, tmp_path, data):
        fx = FeatureExtractor(tiny_config().features)
        straight = TrainState.create(tiny_config(), 4)
        hist = train(straight, data, 5, fx)

        part = TrainState.create(tiny_config(), 4)
        first = train(part, data, 2, fx)
        save_checkpoint(tmp_path / "mid.dmat", part)
        resumed = load_checkpoint(tmp_path / "mid.dmat", tiny_config())
        assert resumed.iteration == 2
        rest = train(resumed, data, 3, fx)
        assert [m["iter"] for m in first + rest] == list(range(5))
        for a, b in zip(hist, first + rest):
            for key in a:
                assert a[key] == pytest.approx(b[key], rel=1e-6, abs=1e-9)
        for k, v in straight.gen.state_dict().items():
            np.testing.assert_allclose(resumed.gen.state_dict()[k], v, rtol=1e-6, atol=1e-9)

    def test_config_mismatch_refused(self, tmp_path):
        save_checkpoint(tmp_path / "c.dmat", TrainState.create(tiny_config(), 0))
        other = apply_ablations(tiny_config(), "no-ru")
        with pytest.raises(ConfigMismatchError) as exc:
            load_checkpoint(tmp_path / "c.dmat", other)
        assert exc.value.stored in str(exc.value) and exc.value.supplied in str(exc.value)

    def test_not_a_checkpoint(self, tmp_path):
        (tmp_path / "x.dmat").write_bytes(b"garbage!" * 4)
        with pytest.raises(ValueError):
            read_checkpoint(tmp_path / "x.dmat")


def _count(module) -> int:
    return sum(p.size for p in module.parameters())


def test_param_count_is_stable():
    assert _count(Generator(full_config(), 0)) == _count(Generator(full_config(), 5))


def test_param_count_near_reference():
    cfg = full_config()
    gen = _count(Generator(cfg, 0))
    disc = _count(PatchDiscriminator(np.random.default_rng(0), cfg.disc))
    print(f"full-scale generator {gen / 1e6:.2f}M, discriminator {disc / 1e6:.2f}M, reference {REFERENCE_PARAMS / 1e6:.2f}M")
    assert abs(gen - REFERENCE_PARAMS) <= 0.15 * REFERENCE_PARAMS


def test_generator_rejects_bad_size():
    from dmat.tensor import ParameterError

    with pytest.raises(ParameterError, match="multiple of 32"):
        Generator(tiny_config(), 0, image_size=48)


def test_generator_output_contract(data):
    gen = Generator(tiny_config(), 0)
    from dmat.data import collate

    _, occluded, masks = collate(data[:2])
    out = gen(occluded, masks)
    assert isinstance(out, Tensor) and out.shape == (2, 3, 32, 32)
