import io
import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from mixsize.analysis import (CorrelationReport, UndefinedCorrelationError, eval_preprocess,
                              eval_resize_target, eval_size_sweep, evaluate, grad_correlation_experiment,
                              imagenet_sweep_sizes, preprocess_batch, rankdata, spearman, write_sweep_csv)
from mixsize.calib import calibrate, calibration_stream
from mixsize.data import synth_dataset
from mixsize.model import ResNetConfig, build_resnet, checksum, model_flops
from mixsize.tensor import Tensor


def brute_ranks(a):
    """O(n^2) average ranks: 1 + #smaller + (#equal - 1) / 2."""
    a = list(a)
    return np.array([1 + sum(b < x for b in a) + (sum(b == x for b in a) - 1) / 2 for x in a])


def brute_spearman(a, b):
    ra, rb = brute_ranks(a), brute_ranks(b)
    ra, rb = ra - ra.mean(), rb - rb.mean()
    return float(np.sum(ra * rb) / np.sqrt(np.sum(ra ** 2) * np.sum(rb ** 2)))


class TestSpearman:
    def test_identical(self, rng):
        a = rng.standard_normal(50)
        assert spearman(a, a) == pytest.approx(1.0, abs=1e-15)

    def test_reversed(self):
        a = np.array([3.0, 1.0, 4.0, 1.5, 9.0, 2.6])
        assert spearman(a, -a) == pytest.approx(-1.0, abs=1e-15)

    def test_small_example(self):
        value = spearman([1, 2, 3, 4, 5], [2, 1, 4, 3, 5])
        assert value == pytest.approx(brute_spearman([1, 2, 3, 4, 5], [2, 1, 4, 3, 5]), abs=1e-14)
        assert value == pytest.approx(0.8, abs=1e-14)

    @settings(max_examples=60)
    @given(st.integers(2, 30).flatmap(lambda n: st.tuples(
        arrays(np.int64, n, elements=st.integers(-3, 3)), arrays(np.int64, n, elements=st.integers(-3, 3)))))
    def test_matches_brute_force_with_ties(self, pair):
        a, b = pair
        if len(set(a.tolist())) < 2 or len(set(b.tolist())) < 2:
            with pytest.raises(UndefinedCorrelationError):
                spearman(a, b)
            return
        r = spearman(a, b)
        assert r == pytest.approx(brute_spearman(a, b), abs=1e-12)
        assert r == pytest.approx(stats.spearmanr(a, b)[0], abs=1e-12)
        assert r == pytest.approx(spearman(b, a), abs=1e-15)
        assert -1 <= r <= 1

    @given(arrays(np.float64, 12, elements=st.floats(-100, 100)))
    def test_rankdata(self, a):
        np.testing.assert_allclose(rankdata(a), brute_ranks(a))

    def test_errors(self):
        with pytest.raises(ValueError):
            spearman([1, 2], [1, 2, 3])
        with pytest.raises(ValueError):
            spearman([1], [1])


class TestPreprocess:
    @pytest.mark.parametrize("S,target", [(96, 109), (160, 182), (224, 256), (32, 36)])
    def test_resize_targets(self, S, target):
        assert eval_resize_target(S) == target

    def test_output_size_and_aspect(self, rng):
        for (h, w), S in itertools.product([(32, 32), (40, 60), (75, 33)], [16, 24, 32, 40]):
            assert eval_preprocess(rng.standard_normal((3, h, w)), S).shape == (3, S, S)

    def test_center_crop_offset(self):
        # an input already at the resize target: only the crop happens
        S, t = 32, eval_resize_target(32)
        img = np.arange(3 * t * t, dtype=np.float64).reshape(3, t, t)
        off = (t - S) // 2
        np.testing.assert_array_equal(eval_preprocess(img, S), img[:, off:off + S, off:off + S])

    def test_batch_protocols(self, rng):
        x = rng.standard_normal((2, 3, 32, 32))
        assert preprocess_batch(x, 24, "crop").shape == (2, 3, 24, 24)
        assert preprocess_batch(x, 24, "resize").shape == (2, 3, 24, 24)
        np.testing.assert_array_equal(preprocess_batch(x, 32, "resize"), x)
        with pytest.raises(ValueError):
            preprocess_batch(x, 24, "zoom")

    def test_imagenet_sizes(self):
        s = imagenet_sweep_sizes()
        assert s[0] == 32 and s[6] == 224 and s[-1] == 416 and len(s) == 13


@pytest.fixture(scope="module")
def tiny():
    data = synth_dataset(40, 4, seed=1)
    model = build_resnet(ResNetConfig(8, 4, 4), 0)
    model.astype(np.float64)
    calibrate(model, calibration_stream(data, 32, 8), 32, 2)
    return model, data


class TestGradCorrelation:
    def test_same_size_is_identity(self, tiny):
        model, data = tiny
        rep = grad_correlation_experiment(model, data, (32, 32), 3, np.random.default_rng(0))
        assert rep.rho_same_image_cross_size == pytest.approx(1.0, abs=1e-12)

    def test_report_and_variance_oracle(self, tiny):
        model, data = tiny
        before = checksum(model)
        rep = grad_correlation_experiment(model, data, (32, 24), 4, np.random.default_rng(3), "final")
        assert checksum(model) == before
        assert -1 <= rep.rho_diff_image_same_size <= 1 and -1 <= rep.rho_same_image_cross_size <= 1
        assert set(rep.var_per_size) == {32, 24} and all(v >= 0 for v in rep.var_per_size.values())
        assert [r["measure"] for r in rep.csv_rows()] == ["rho_x32_x24", "rho_x32_y32", "V_x24", "V_x32"]
        assert "rho(x^(32), x^(24))" in rep.summary()

    def test_variance_definition(self, tiny, monkeypatch):
        """Mean over coordinates of the across-image unbiased variance."""
        import mixsize.analysis as an

        captured = []
        real = an.flat_gradient

        def spy(model, image, label):
            g = real(model, image, label)
            captured.append((image.shape[-1], g))
            return g

        monkeypatch.setattr(an, "flat_gradient", spy)
        model, data = tiny
        rep = grad_correlation_experiment(model, data, (32, 24), 5, np.random.default_rng(1))
        # three gradients per pair: x@32, x@24, y@32 -- V uses only the x gradients
        xs32 = np.stack([captured[3 * k][1] for k in range(5)])
        xs24 = np.stack([captured[3 * k + 1][1] for k in range(5)])
        assert rep.var_per_size[32] == pytest.approx(xs32.var(axis=0, ddof=1).mean(), rel=1e-10)
        assert rep.var_per_size[24] == pytest.approx(xs24.var(axis=0, ddof=1).mean(), rel=1e-10)
        rho = np.mean([spearman(captured[3 * k][1], captured[3 * k + 1][1]) for k in range(5)])
        assert rep.rho_same_image_cross_size == pytest.approx(rho, abs=1e-12)

    def test_reproducible(self, tiny):
        model, data = tiny
        a = grad_correlation_experiment(model, data, (32, 24), 3, np.random.default_rng(9))
        b = grad_correlation_experiment(model, data, (32, 24), 3, np.random.default_rng(9))
        assert a == b

    def test_needs_two_pairs(self, tiny):
        with pytest.raises(ValueError):
            grad_correlation_experiment(*tiny, (32, 24), 1)


class TestSweep:
    def test_single_size_equals_plain_evaluation(self, tiny):
        model, data = tiny
        rows = eval_size_sweep(model, data, [32], calibrate_each=False)
        assert rows[32].top1 == evaluate(model, data, 32)
        assert rows[32].flops == model_flops(model, 32)

    def test_flops_quadruple_and_side_effect_free(self, tiny):
        model, data = tiny
        before = {n: l.stats.state()["mean"].copy() for n, l in model.bn_layers()}
        rows = eval_size_sweep(model, data, [16, 32], calibrate_each=True, calib_batches=2,
                               calib_batch_size=8)
        assert 3.6 <= rows[32].flops / rows[16].flops <= 4.4
        for n, l in model.bn_layers():
            np.testing.assert_array_equal(l.stats.mean, before[n])
        buf = io.StringIO()
        write_sweep_csv(rows.values(), buf)
        lines = buf.getvalue().splitlines()
        assert lines[0] == "size,top1,flops,calibrated" and len(lines) == 3
        assert lines[1].startswith("16,") and lines[1].endswith(",1")

    def test_errors(self, tiny):
        with pytest.raises(ValueError):
            eval_size_sweep(*tiny, [])
        with pytest.raises(ValueError):
            eval_size_sweep(*tiny, [4])
