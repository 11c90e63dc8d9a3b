import numpy as np
import pytest

from rcd import tape as tp
from rcd.backbone import forward, init_backbone, oracle_backbone, param_vars, forward_graph
from rcd.errors import ConfigError, DegenerateInputError
from rcd.pipeline import (
    LevelSchedule,
    NoiseMapStack,
    decorrelate,
    decorrelate_graph,
    default_schedule,
    max_offdiag_correlation,
    normalize_graph,
    normalize_to_levels,
    pairwise_correlation,
    run_pipeline,
    sd,
    split_raw,
)
from rcd.tape import GradTape, gradient_check
from rcd.whitening import covariance, offdiag_frobenius


def shared_component_stack(rng, schedule, height=16, width=16, channels=3, weight=0.7):
    """Maps sharing a common component; pairwise correlation ~ weight^2."""
    shared = rng.standard_normal((height, width, channels))
    maps = [weight * shared + (1 - weight ** 2) ** 0.5 * rng.standard_normal(shared.shape)
            for _ in range(schedule.count)]
    return normalize_to_levels(np.concatenate(maps, axis=2), schedule)


SCHED4 = LevelSchedule.from_255([15, 30, 45, 60])


class TestSd:
    def test_constant_map_is_zero(self):
        assert sd(np.full((3, 3, 1), 2.5)) == 0.0

    def test_alternating_signs(self):
        assert sd(np.array([1.0, -1.0, 1.0, -1.0])) == pytest.approx(np.sqrt(4.0 / 3.0))

    def test_seeded_unit_gaussian(self):
        x = np.random.default_rng(0).standard_normal((64, 64))
        assert 0.95 <= sd(x) <= 1.05

    def test_rejects_single_element(self):
        with pytest.raises(DegenerateInputError):
            sd(np.array([1.0]))


class TestLevelSchedule:
    def test_from_255_stores_fractions(self):
        s = LevelSchedule.from_255([5, 10, 15])
        np.testing.assert_allclose(s.levels, np.array([5, 10, 15]) / 255.0)
        np.testing.assert_allclose(s.as_255, [5, 10, 15])

    def test_default_schedule_is_paper_grid(self):
        s = default_schedule()
        assert s.count == 12
        np.testing.assert_allclose(s.as_255, 5.0 * np.arange(1, 13))

    @pytest.mark.parametrize("levels", [[], [0.0, 1.0], [2.0, 1.0], [1.0, 1.0]])
    def test_rejects_bad_levels(self, levels):
        with pytest.raises(ConfigError):
            LevelSchedule(np.asarray(levels))


class TestNormalize:
    def test_exact_scale_ratio(self):
        # sample sd exactly 2: alternating +-a with a = 2*sqrt((n-1)/n)
        a = 2.0 * np.sqrt(3.0 / 4.0)
        m = np.array([a, -a, a, -a]).reshape(1, 4, 1)
        raw = m  # single level
        stack = normalize_to_levels(raw, LevelSchedule(np.array([10.0])))
        np.testing.assert_allclose(stack.maps[0], 5.0 * m, rtol=1e-12)

    def test_idempotent_on_calibrated_maps(self):
        rng = np.random.default_rng(1)
        raw = rng.standard_normal((8, 8, 2))
        s = LevelSchedule(np.array([0.1, 0.2]))
        once = normalize_to_levels(raw, s)
        again = normalize_to_levels(np.concatenate(list(once.maps), axis=2), s)
        np.testing.assert_allclose(again.maps, once.maps, rtol=1e-12)

    def test_output_sds_match_schedule(self):
        rng = np.random.default_rng(2)
        raw = rng.standard_normal((12, 12, 2))
        s = LevelSchedule(np.array([5.0, 10.0]))
        stack = normalize_to_levels(raw, s)
        for m, level in zip(stack.maps, s.levels):
            assert abs(sd(m) - level) / level <= 1e-9

    def test_direction_unchanged(self):
        rng = np.random.default_rng(3)
        raw = rng.standard_normal((6, 6, 1))
        stack = normalize_to_levels(raw, LevelSchedule(np.array([0.3])))
        cos = np.dot(stack.maps[0].ravel(), raw.ravel())
        assert cos / (np.linalg.norm(stack.maps[0]) * np.linalg.norm(raw)) == pytest.approx(1.0)

    def test_degenerate_map_replaced_with_seeded_noise(self):
        raw = np.zeros((8, 8, 1))
        s = LevelSchedule(np.array([0.1]))
        with pytest.warns(UserWarning, match="degenerate"):
            stack = normalize_to_levels(raw, s, fallback_seed=5)
        assert abs(sd(stack.maps[0]) - 0.1) / 0.1 <= 1e-9
        with pytest.warns(UserWarning):
            stack2 = normalize_to_levels(raw, s, fallback_seed=5)
        np.testing.assert_array_equal(stack.maps, stack2.maps)  # seeded, deterministic

    def test_split_raw_roundtrip(self):
        rng = np.random.default_rng(4)
        raw = rng.standard_normal((5, 6, 6))
        maps = split_raw(raw, 3)
        assert maps.shape == (3, 5, 6, 2)
        np.testing.assert_array_equal(np.concatenate(list(maps), axis=2), raw)


class TestDecorrelate:
    def test_orthogonal_zero_mean_input_unchanged(self):
        # Hadamard-style sign patterns: orthogonal, zero-mean rows
        m1 = np.array([[1.0, -1.0], [1.0, -1.0]]).reshape(2, 2, 1)
        m2 = np.array([[1.0, 1.0], [-1.0, -1.0]]).reshape(2, 2, 1)
        s = LevelSchedule(np.array([0.1, 0.2]))
        stack = normalize_to_levels(np.concatenate([m1, m2], axis=2), s)
        out = decorrelate(stack, method="eigen")
        np.testing.assert_allclose(out.maps, stack.maps, atol=1e-6)
        assert out.decorrelated

    def test_single_level_passthrough(self):
        rng = np.random.default_rng(5)
        stack = normalize_to_levels(rng.standard_normal((4, 4, 1)),
                                    LevelSchedule(np.array([0.1])))
        out = decorrelate(stack)
        assert out.decorrelated
        np.testing.assert_array_equal(out.maps, stack.maps)

    def test_identical_maps_fall_back_with_diagnostic(self):
        rng = np.random.default_rng(6)
        m = rng.standard_normal((8, 8, 1))
        raw = np.concatenate([m, m], axis=2)
        stack = normalize_to_levels(raw, LevelSchedule(np.array([0.1, 0.2])))
        with pytest.warns(UserWarning, match="eigenvalue"):
            out = decorrelate(stack, method="eigen")
        assert np.isfinite(out.maps).all()
        for mp, level in zip(out.maps, out.schedule.levels):
            assert abs(sd(mp) - level) / level <= 1e-9

    def test_shared_component_stack_decorrelates(self):
        rng = np.random.default_rng(7)
        stack = shared_component_stack(rng, SCHED4, weight=0.7)
        assert max_offdiag_correlation(stack) > 0.3  # genuinely correlated input
        out = decorrelate(stack, method="eigen")
        assert max_offdiag_correlation(out) <= 0.05

    def test_offdiag_covariance_tiny_before_renormalization(self):
        rng = np.random.default_rng(8)
        stack = shared_component_stack(rng, SCHED4, weight=0.7)
        rows = stack.flat()
        means = rows.mean(axis=1, keepdims=True)
        from rcd.whitening import eigen_inv_sqrt, trace_normalize
        w = eigen_inv_sqrt(trace_normalize(covariance(rows)))
        pre = covariance(w @ (rows - means) + means)
        bound = 1e-6 * np.outer(stack.schedule.levels, stack.schedule.levels)
        offdiag = np.abs(pre - np.diag(np.diag(pre)))
        assert (offdiag <= bound).all()

    def test_offdiag_frobenius_drops_10x(self):
        rng = np.random.default_rng(9)
        stack = shared_component_stack(rng, SCHED4, weight=0.7)
        out = decorrelate(stack, method="eigen")
        before = offdiag_frobenius(covariance(stack.flat()))
        after = offdiag_frobenius(covariance(out.flat()))
        assert before / after >= 10.0

    def test_newton_t4_moderate_correlation(self):
        rng = np.random.default_rng(10)
        stack = shared_component_stack(rng, SCHED4, weight=0.45)
        out = decorrelate(stack, iterations=4)
        assert max_offdiag_correlation(out) <= 0.1

    def test_idempotent_within_one_percent(self):
        rng = np.random.default_rng(11)
        stack = shared_component_stack(rng, SCHED4, weight=0.7)
        once = decorrelate(stack, method="eigen")
        twice = decorrelate(once, method="eigen")
        for a, b in zip(once.maps, twice.maps):
            assert np.linalg.norm(b - a) / np.linalg.norm(a) <= 0.01

    def test_variance_linearity(self):
        rng = np.random.default_rng(12)
        stack = decorrelate(shared_component_stack(rng, SCHED4, weight=0.7),
                            method="eigen")
        for _ in range(100):
            c = rng.normal(size=4)
            var = np.var(c @ stack.flat(), ddof=1)
            pred = float(np.sum(c ** 2 * SCHED4.levels ** 2))
            assert abs(var - pred) <= 0.01 * pred


class TestRunPipeline:
    def test_oracle_backbone_single_level_is_scaled_residual(self):
        rng = np.random.default_rng(13)
        img = rng.uniform(size=(8, 8, 1))
        clean = img + rng.normal(scale=0.1, size=img.shape)

        from rcd.backbone import BackboneParams, ConvLayer
        raw = oracle_backbone(img, clean, levels=1, perturbation=0.0)
        s = LevelSchedule(np.array([0.05]))
        stack = decorrelate(normalize_to_levels(raw, s))
        residual = clean - img
        expected = residual * (0.05 / sd(residual))
        np.testing.assert_allclose(stack.maps[0], expected, rtol=1e-9)

    def test_zero_params_hit_fallback_and_stay_calibrated(self):
        params = init_backbone(2, 1, seed=0)
        for layer in params.layers:
            layer.weight[:] = 0.0
            layer.bias[:] = 0.0
        img = np.random.default_rng(14).uniform(size=(8, 8, 1))
        s = LevelSchedule(np.array([0.1, 0.2]))
        with pytest.warns(UserWarning, match="degenerate"):
            stack = run_pipeline(params, img, s)
        for m, level in zip(stack.maps, s.levels):
            assert abs(sd(m) - level) / level <= 1e-9

    def test_schedule_width_mismatch_rejected(self):
        params = init_backbone(2, 1, seed=0)
        with pytest.raises(ConfigError):
            run_pipeline(params, np.zeros((4, 4, 1)), SCHED4)

    def test_deterministic(self):
        params = init_backbone(4, 1, seed=1)
        img = np.random.default_rng(15).uniform(size=(8, 8, 1))
        a = run_pipeline(params, img, SCHED4)
        b = run_pipeline(params, img, SCHED4)
        np.testing.assert_array_equal(a.maps, b.maps)


class TestGraphVersions:
    def test_normalize_graph_matches_plain(self):
        rng = np.random.default_rng(16)
        raw = rng.standard_normal((6, 6, 4))
        s = LevelSchedule(np.array([0.05, 0.1]))
        t = GradTape()
        maps = normalize_graph(t, t.leaf(raw), s)
        plain = normalize_to_levels(raw, s)
        for var, m in zip(maps, plain.maps):
            np.testing.assert_allclose(var.value, m, rtol=1e-12)

    def test_decorrelate_graph_matches_plain(self):
        rng = np.random.default_rng(17)
        stack = shared_component_stack(rng, SCHED4, height=8, width=8, channels=1)
        t = GradTape()
        map_vars = [t.leaf(m) for m in stack.maps]
        out = decorrelate_graph(t, map_vars, SCHED4, iterations=4)
        plain = decorrelate(stack, iterations=4)
        for var, m in zip(out, plain.maps):
            np.testing.assert_allclose(var.value, m, rtol=1e-10)

    def test_normalize_then_decorrelate_gradients(self):
        rng = np.random.default_rng(18)
        raw = rng.standard_normal((4, 4, 2))
        s = LevelSchedule(np.array([0.1, 0.2]))
        target = rng.standard_normal((4, 4, 1))

        def f(t, vraw):
            maps = normalize_graph(t, vraw, s)
            dec = decorrelate_graph(t, maps, s, iterations=3)
            loss = t.leaf(np.float64(0.0))
            for m in dec:
                loss = tp.add(loss, tp.vmean(tp.square(tp.sub(m, target))))
            return loss

        assert gradient_check(f, [raw]) <= 1e-4
