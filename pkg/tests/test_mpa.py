import numpy as np
import pytest

from mpacodec.engine import DimensionError, ParameterStore, Tensor, backward, ops, precision
from mpacodec.mpa import (ConfigurationError, DomainError, MultiPathBlock, Path, Predictor,
                          RatioSchedule, binarize_mask_infer, dense_aggregate, gumbel_sigmoid,
                          logistic_noise,
                          mpa_apply, partial_average, path_param_count, predict_scores,
                          ratio_decoder, ratio_from_quality, sample_mask_train)


class TestPartialAverage:
    def test_hand_example(self):
        u = np.stack([np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[5.0, 6.0], [7.0, 8.0]])], axis=-1)
        out = partial_average(u).data
        np.testing.assert_array_equal(out[..., 0], [[1, 2], [3, 4]])
        np.testing.assert_array_equal(out[..., 1], np.full((2, 2), 6.5))

    def test_constant_input_is_identity(self):
        u = np.broadcast_to(np.arange(4.0), (3, 5, 4)).copy()
        np.testing.assert_array_equal(partial_average(u).data, u)

    def test_single_position_is_identity(self):
        u = np.random.default_rng(0).normal(size=(1, 1, 6)).astype(np.float32)
        np.testing.assert_array_equal(partial_average(u).data, u)

    def test_odd_channels(self):
        with pytest.raises(ConfigurationError):
            partial_average(np.ones((2, 2, 3)))

    def test_batch_means_are_per_image(self):
        u = np.zeros((2, 2, 2, 2))
        u[1, ..., 1] = 4.0
        out = partial_average(u).data
        assert (out[0, ..., 1] == 0).all() and (out[1, ..., 1] == 4).all()


class TestRatioSchedule:
    def test_endpoints(self):
        assert ratio_from_quality(1) == 0.0
        assert ratio_from_quality(8) == 1.0

    def test_midpoint(self):
        assert ratio_from_quality(4.5) == pytest.approx((np.sqrt(5) - 1) / 4, abs=1e-12)

    @pytest.mark.parametrize("q", [0.99, 8.01, -1])
    def test_out_of_range(self, q):
        with pytest.raises(DomainError):
            ratio_from_quality(q)

    @pytest.mark.parametrize("kw", [{"beta": 1.0}, {"q_max": 1}])
    def test_invalid_schedule(self, kw):
        with pytest.raises(ConfigurationError):
            RatioSchedule(**kw)

    def test_decoder(self):
        assert ratio_decoder(0) == 1
        assert ratio_decoder(1) == 0
        assert ratio_decoder(3 / 7) == pytest.approx(4 / 7, abs=1e-15)
        with pytest.raises(DomainError):
            ratio_decoder(1.5)


def _predictor(c=8, seed=0):
    return Predictor(ParameterStore(), "p", c, np.random.default_rng(seed))


class TestPredictor:
    def test_zero_weights_give_constant_scores(self):
        p = _predictor()
        for w, b in (p.fc1, p.fc2, p.fc3):
            w.data[:] = 0
            b.data[:] = 0
        p.fc3[1].data[:] = 0.7
        s = predict_scores(np.random.default_rng(1).normal(size=(4, 4, 8)), p).data
        assert s.shape == (4, 4, 1)
        np.testing.assert_allclose(s, 0.7)

    def test_three_layers_and_bias_table(self):
        store = ParameterStore()
        Predictor(store, "p", 8, np.random.default_rng(0))
        weights = [n for n in store.names() if n.endswith(".w")]
        assert len(weights) == 3
        assert store["p.bias"].shape == (8,)

    def test_permutation_equivariance(self):
        with precision(np.float64):
            p = _predictor()
            x = np.random.default_rng(2).normal(size=(4, 4, 8))
            perm = np.random.default_rng(3).permutation(16)
            xp = x.reshape(16, 8)[perm].reshape(4, 4, 8)
            s = p.scores(x).data.reshape(16)
            sp = p.scores(xp).data.reshape(16)
        np.testing.assert_allclose(sp, s[perm], rtol=1e-12, atol=1e-12)

    def test_global_context_reaches_every_position(self):
        with precision(np.float64):
            p = _predictor()
            x = np.random.default_rng(4).normal(size=(4, 4, 8))
            x2 = x.copy()
            x2[0, 0] += 1.0
            diff = np.abs(p.scores(x).data - p.scores(x2).data)
        assert (diff > 0).all()

    def test_odd_hidden_width(self):
        with pytest.raises(ConfigurationError):
            _predictor(c=6)


class TestTrainMask:
    @pytest.mark.parametrize("logit,expect", [(20.0, 1), (-20.0, 0)])
    def test_saturated_logits(self, logit, expect):
        m = gumbel_sigmoid(np.full((100000,), logit), np.random.default_rng(0)).data
        assert np.mean(m == expect) > 0.999

    def test_values_are_binary_and_level_bias_applies(self):
        p = _predictor()
        p.bias.data[3] = 50.0
        m = sample_mask_train(np.zeros((4, 4, 1), np.float32), p, 3, np.random.default_rng(0))
        assert set(np.unique(m.data)) <= {0.0, 1.0}
        assert (m.data == 1).all()

    def test_level_out_of_range(self):
        with pytest.raises(DomainError):
            sample_mask_train(np.zeros((2, 2, 1)), _predictor(), 8, np.random.default_rng(0))

    def test_straight_through_gradient_is_soft_sigmoid(self):
        with precision(np.float64):
            logits = Tensor(np.random.default_rng(5).normal(size=(50,)), requires_grad=True)
            m = gumbel_sigmoid(logits, np.random.default_rng(6))
            backward(ops.sum(m))
            noise = logistic_noise(np.random.default_rng(6), (50,), np.float64)
            s = 1 / (1 + np.exp(-(logits.data + noise)))
        np.testing.assert_allclose(logits.grad, s * (1 - s), rtol=1e-12)


class TestInferMask:
    def test_extremes(self):
        s = np.random.default_rng(0).normal(size=(3, 5))
        assert binarize_mask_infer(s, 1.0).all()
        assert not binarize_mask_infer(s, 0.0).any()

    def test_hand_example(self):
        m = binarize_mask_infer(np.array([[0.9, 0.1], [0.5, 0.4]]), 0.5)
        np.testing.assert_array_equal(m, [[True, False], [True, False]])

    def test_ties_prefer_lower_raster_index(self):
        m = binarize_mask_infer(np.zeros((2, 3)), 0.5)
        np.testing.assert_array_equal(m.reshape(-1), [1, 1, 1, 0, 0, 0])

    def test_batched_layout(self):
        m = binarize_mask_infer(np.random.default_rng(1).normal(size=(2, 4, 4, 1)), 0.25)
        assert m.shape == (2, 4, 4) and (m.sum(axis=(1, 2)) == 4).all()


def _paths(c=8, seed=0):
    store, rng = ParameterStore(), np.random.default_rng(seed)
    return (Path(store, "main", "inverted_bottleneck", c, rng),
            Path(store, "side", "bottleneck", c, rng))


class TestRouting:
    def test_all_ones_is_main(self):
        main, side = _paths()
        x = np.random.default_rng(1).normal(size=(4, 4, 8)).astype(np.float32)
        out = mpa_apply(x, np.ones((4, 4), bool), main, side)
        np.testing.assert_array_equal(out.data, main(x).data)
        assert side.evaluations == 0

    def test_all_zeros_is_side(self):
        main, side = _paths()
        x = np.random.default_rng(2).normal(size=(4, 4, 8)).astype(np.float32)
        out = mpa_apply(x, np.zeros((4, 4), bool), main, side)
        np.testing.assert_array_equal(out.data, side(x).data)

    def test_random_mask_matches_dense_oracle(self):
        with precision(np.float64):
            main, side = _paths()
            rng = np.random.default_rng(3)
            x = rng.normal(size=(4, 4, 8))
            m = rng.random((4, 4)) < 0.5
            out = mpa_apply(x, m, main, side).data
            oracle = dense_aggregate(x, m.astype(np.float64), main, side).data
        assert np.abs(out - oracle).max() == 0

    def test_positions_are_conserved(self):
        main, side = _paths()
        m = np.random.default_rng(4).random((2, 5, 3)) < 0.3
        mpa_apply(np.zeros((2, 5, 3, 8), np.float32), m, main, side)
        assert main.evaluations == m.sum() and side.evaluations == (~m).sum()

    def test_mask_shape_mismatch(self):
        main, side = _paths()
        with pytest.raises(DimensionError):
            mpa_apply(np.zeros((4, 4, 8)), np.ones((4, 3), bool), main, side)

    def test_path_channel_mismatch(self):
        main, _ = _paths()
        with pytest.raises(DimensionError):
            main(np.zeros((2, 4)))


class TestPaths:
    def test_zero_weights(self):
        main, side = _paths()
        for p in (main, side):
            for t in p.tensors:
                t.data[:] = 0
            assert not p(np.random.default_rng(0).normal(size=(3, 8))).data.any()

    # layer-extent sums: 8*4+4 + 4*8+8 and 8*16+16 + 16*8+8
    @pytest.mark.parametrize("kind,expected", [("bottleneck", 76), ("inverted_bottleneck", 280)])
    def test_parameter_counts(self, kind, expected):
        p = Path(ParameterStore(), "x", kind, 8, np.random.default_rng(0))
        assert p.param_count() == expected == path_param_count(kind, 8)
        assert p.hidden == (4 if kind == "bottleneck" else 16)

    def test_unknown_kind(self):
        with pytest.raises(ConfigurationError):
            Path(ParameterStore(), "x", "wide", 8, np.random.default_rng(0))


class TestBlock:
    def test_side_initialized_from_main_reproduces_it(self):
        store, rng = ParameterStore(), np.random.default_rng(0)
        blk = MultiPathBlock(store, "b", 8, rng)
        blk.add_side(store, "mse", "inverted_bottleneck", rng, init_from=blk.main)
        x = rng.normal(size=(1, 4, 4, 8)).astype(np.float32)
        s = np.ones(8, np.float32)
        a = blk(x, s).data
        b = blk(x, s, mask=np.zeros((1, 4, 4), bool), side="mse").data
        np.testing.assert_array_equal(a, b)

    def test_zero_output_side_has_no_mlp_contribution(self):
        store, rng = ParameterStore(), np.random.default_rng(1)
        blk = MultiPathBlock(store, "b", 8, rng)
        side = blk.add_side(store, "cls", "bottleneck", rng)
        assert not side.w2.data.any() and not side.b2.data.any()
