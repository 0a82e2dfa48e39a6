import functools

import numpy as np
import pytest

from mpacodec.codec import Codec
from mpacodec.data import synthetic_textures
from mpacodec.engine import Tensor, backward, grad_check, ops, precision, relaxed
from mpacodec.mpa import ConfigurationError
from mpacodec.training import (LossWeights, PerceptualProxy, TaskModel, TrainRun, discriminator_loss,
                               distortion_d, gan_losses, generator_loss, lr_at, parse_config,
                               ratio_loss, stage1_objective, stage2_loss, stage2_objective,
                               train_stage2)

from grad_cases import TOY, loss_cases, mask_ste_case

LOG2 = np.log(2.0)


class ConstD:
    """Stand-in discriminator with a fixed output probability."""

    def __init__(self, p):
        self.p = p

    def __call__(self, cond, img):
        img = img if isinstance(img, Tensor) else Tensor(img)
        return ops.add(ops.mul(ops.mean(img), 0.0), self.p)


def _img(seed, shape=(2, 16, 16, 3)):
    return np.random.default_rng(seed).uniform(size=shape)


class TestDistortion:
    def test_identical(self):
        x = _img(0)
        assert distortion_d(x, x).item() == 0.0

    def test_offset_one_level(self):
        x = _img(1) * 0.5
        with precision(np.float64):
            assert distortion_d(x, x + 1 / 255).item() == pytest.approx(0.01, rel=1e-9)

    def test_black_vs_white(self):
        z = np.zeros((1, 4, 4, 3))
        assert distortion_d(z, z + 1).item() == pytest.approx(650.25)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            distortion_d(np.zeros((1, 4, 4, 3)), np.zeros((1, 4, 5, 3)))


class TestRatioLoss:
    def test_on_target(self):
        assert ratio_loss([np.full(10, 0.3), np.full(4, 0.3)], 0.3).item() == pytest.approx(0, abs=1e-12)

    def test_single_stage(self):
        with precision(np.float64):
            assert ratio_loss([np.full(8, 0.75)], 0.5).item() == pytest.approx(0.0625)

    def test_two_stages(self):
        with precision(np.float64):
            assert ratio_loss([np.full(5, 0.2), np.full(5, 0.4)], 0.3).item() == pytest.approx(0.01)


class TestGan:
    def test_half_discriminator(self):
        x = _img(2)
        with precision(np.float64):
            g, d = gan_losses(ConstD(0.5), None, x, x)
        assert g.item() == pytest.approx(LOG2)
        assert d.item() == pytest.approx(2 * LOG2)

    def test_clamped_extremes(self):
        x = _img(3)

        class Perfect:
            def __call__(self, cond, img):
                # real images come in as the exact batch, fakes as anything else
                return Tensor(np.ones((1,)) if img is x else np.zeros((1,)))

        with precision(np.float64):
            g, d = gan_losses(Perfect(), None, x, x + 0.1)
        assert np.isfinite(d.item()) and d.item() == pytest.approx(-2 * np.log1p(-1e-6))
        assert g.item() == pytest.approx(-np.log(1e-6))

    def test_discriminator_probabilities(self):
        from mpacodec.training import Discriminator
        D = Discriminator(8, seed=0, cond_channels=2, widths=(4, 4))
        p = D(np.random.default_rng(0).normal(size=(2, 1, 1, 8)), _img(4)).data
        assert ((p > 0) & (p < 1)).all()


class TestProxy:
    def test_zero_and_symmetry(self):
        proxy = PerceptualProxy()
        a, b = _img(5), _img(6)
        assert proxy(a, a).item() == 0.0
        assert proxy(a, b).item() == pytest.approx(proxy(b, a).item(), rel=1e-6)

    def test_positive_on_random_pairs(self):
        rng = np.random.default_rng(7)
        for i in range(100):
            proxy = PerceptualProxy(seed=i, widths=(4, 4, 4))
            a, b = rng.uniform(size=(2, 1, 8, 8, 3))
            assert proxy(a, b).item() > 0

    def test_deterministic_across_instances(self):
        a, b = _img(8), _img(9)
        assert PerceptualProxy()(a, b).item() == PerceptualProxy()(a, b).item()


class TestObjectives:
    def test_stage1_zero(self):
        w = LossWeights()
        assert stage1_objective(w, 3, 0.0, 0.0, 0.0, 0.0, gan_g=None).item() == 0.0

    def test_stage2_zero(self):
        assert stage2_objective(LossWeights(), 5, 0.0, 0.0, 0.0).item() == 0.0

    @pytest.mark.parametrize("q,lam", [(1, 18.0), (4, 2.5), (8, 0.18)])
    def test_rate_weight_selection(self, q, lam):
        w = LossWeights()
        assert w.rate_weight(q) == lam
        assert stage1_objective(w, q, 1.0, 0.0, 0.0, 0.0).item() == pytest.approx(lam)

    def test_fractional_quality_rejected(self):
        with pytest.raises(ConfigurationError):
            LossWeights().rate_weight(2.5)

    def test_weights_must_decrease(self):
        with pytest.raises(ConfigurationError):
            LossWeights(rate=(1, 2, 3, 4, 5, 6, 7, 8))

    def test_lr_schedule(self):
        assert lr_at(0, 100, 1e-4) == 1e-4
        assert lr_at(74, 100, 1e-4) == 1e-4
        assert lr_at(75, 100, 1e-4) == pytest.approx(1e-5)


def _cls_codec():
    m = Codec(TOY)
    m.register_task("cls")
    prefixes = tuple(m.task_prefixes("cls"))
    m.store.set_trainable(lambda n: n.startswith(prefixes))
    return m


class TestStage2:
    def test_uniform_classifier_ce_is_log2(self):
        tm = TaskModel("cls", seed=0)
        for n, p in tm.store.items():
            if n.endswith(".w") or n.endswith(".b"):
                p.data[:] = 0
        tm.freeze()
        batch = synthetic_textures(4, 16, seed=1)
        for x in (batch.images, np.zeros_like(batch.images), _img(10, batch.images.shape)):
            assert tm.loss(x, batch).item() == pytest.approx(LOG2, rel=1e-6)

    def test_frozen_parameters_get_no_gradient(self):
        m = _cls_codec()
        tm = TaskModel("cls", seed=1).freeze()
        batch = synthetic_textures(2, 16, seed=2)
        rep = stage2_loss(m, batch, 3, 4 / 7, "cls", np.random.default_rng(0), task_model=tm)
        backward(rep.total)
        prefixes = tuple(m.task_prefixes("cls"))
        got = 0
        for n, p in m.store.items():
            if n.startswith(prefixes):
                got += p.grad is not None
            else:
                assert p.grad is None, n
        for _, p in tm.store.items():
            assert p.grad is None
        assert got > 0

    def test_unregistered_task(self):
        m = Codec(TOY)
        batch = synthetic_textures(2, 16, seed=3)
        with pytest.raises(ConfigurationError):
            stage2_loss(m, batch, 3, 0.5, "seg", np.random.default_rng(0))

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(ConfigurationError):
            train_stage2(TrainRun(stage=2, task="mse", steps=1))
        with pytest.raises(ConfigurationError):
            train_stage2(TrainRun(stage=2, task="mse", steps=1, init=str(tmp_path / "none.ckpt")))


class TestConfig:
    def test_parse(self):
        run = parse_config("stage = 2\n# comment\ntask=cls  # trailing\nsteps=10\nlr=0.001\n")
        assert (run.stage, run.task, run.steps, run.lr) == (2, "cls", 10, 1e-3)

    @pytest.mark.parametrize("text,key", [
        ("stage=3", "stage"), ("steps=ten", "steps"), ("colour=red", "colour"),
        ("stage=2\ntask=depth", "task"), ("size=20", "size"), ("lr=-1", "lr"),
    ])
    def test_errors_name_the_key(self, text, key):
        with pytest.raises(ConfigurationError, match=key):
            parse_config(text)

    def test_missing_equals(self):
        with pytest.raises(ConfigurationError, match="line 1"):
            parse_config("stage 1")


GRAD_CASES = ["distortion", "perceptual_proxy", "ratio_loss", "gan_generator", "gan_discriminator",
              "stage1_total", "stage2_mse", "stage2_cls_composite", "gumbel_sigmoid"]


@functools.cache
def _grad_cases():
    with precision(np.float64):
        return {name: (f, params) for name, f, params in loss_cases() + [mask_ste_case()]}


@pytest.mark.parametrize("name", GRAD_CASES)
def test_loss_gradients(name):
    f, params = _grad_cases()[name]
    with precision(np.float64), relaxed():
        err = grad_check(f, params, eps=1e-6, max_entries=2)
    assert err < 1e-4, f"{name}: {err:.3g}"


def test_generator_and_discriminator_touch_disjoint_sets():
    from mpacodec.training import Discriminator
    m = Codec(TOY)
    D = Discriminator(TOY.latent_channels, seed=0, cond_channels=2, widths=(4, 4))
    x = synthetic_textures(2, 16, seed=4).images
    yhat = np.round(np.random.default_rng(0).normal(size=(2, 1, 1, 8)))
    D.store.set_trainable(lambda n: False)
    xhat = m.decode_synthesis(yhat, 2, clamp=False)
    backward(generator_loss(D, yhat, xhat))
    assert all(p.grad is None for p in (p for _, p in D.store.items()))
    assert any(p.grad is not None for p in m.store.trainable())
    for p in (p for _, p in m.store.items()):
        p.grad = None
    D.store.set_trainable(lambda n: True)
    backward(discriminator_loss(D, yhat, xhat.detach(), yhat, x))
    assert all(p.grad is None for p in (p for _, p in m.store.items()))
    assert all(p.grad is not None for p in D.store.trainable())
