from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from mixsize.sched import (PRESETS, DistributionError, MixSizeDistribution, SampledStep, budget_error,
                           derive_step, make_schedule, mean_stats, point_mass, preset, progressive_epochs,
                           round_half_up, sample_sizes, sample_step, scaled_learning_rate, validate)

CIFAR = [(40, 0.2), (32, 0.3), (24, 0.3), (16, 0.2)]


def cifar(mode="fixed"):
    return MixSizeDistribution(list(CIFAR), 32, 64, 1, mode)


class TestValidate:
    def test_cifar_ok(self):
        validate(cifar())

    def test_point_mass_ok(self):
        validate(MixSizeDistribution([(32, 1.0)]))

    @pytest.mark.parametrize("entries", [
        [(32, 0.5), (16, 0.4)],
        [(32, 1.2), (16, -0.2)],
        [(32, 0.5), (4, 0.5)],
        [],
        [(32, 0.5), (32, 0.5)],
    ])
    def test_rejects(self, entries):
        with pytest.raises(DistributionError):
            validate(MixSizeDistribution(entries))

    def test_unknown_mode(self):
        with pytest.raises(DistributionError):
            validate(MixSizeDistribution([(32, 1.0)], mode="C_plus"))

    def test_parse_roundtrip(self):
        d = MixSizeDistribution.parse("40:0.2, 32:0.3 24:0.3,16:0.2")
        assert d.entries == CIFAR
        assert MixSizeDistribution.parse(d.format()).entries == CIFAR
        with pytest.raises(DistributionError):
            MixSizeDistribution.parse("40")


class TestDeriveStep:
    def test_b_plus_examples(self):
        d = cifar("B_plus")
        assert derive_step(16, d) == (256, 1)
        assert derive_step(40, d) == (41, 1)
        assert 40 ** 2 * 41 == 65_600 and 32 ** 2 * 64 == 65_536

    def test_fixed(self):
        d = cifar()
        assert all(derive_step(s, d) == (64, 1) for s in (16, 24, 32, 40))

    def test_d_plus_imagenet144_duplicates(self):
        d = preset("imagenet144", "D_plus")
        dups = {s: derive_step(s, d)[1] for s in d.sizes}
        assert dups == {256: 1, 224: 1, 128: 3, 96: 5}
        assert mean_stats(d)[2] == pytest.approx(3.0, abs=1e-12)

    def test_d_plus_cifar_small_size(self):
        assert derive_step(16, cifar("D_plus")) == (64, 4)
        assert derive_step(32, cifar("D_plus")) == (64, 1)

    @pytest.mark.parametrize("x,expected", [(0.5, 1), (1.5, 2), (2.5, 3), (40.96, 41), (2.49, 2)])
    def test_round_half_up(self, x, expected):
        assert round_half_up(x) == expected

    @given(st.integers(8, 512), st.integers(8, 512), st.integers(1, 512), st.integers(1, 8),
           st.sampled_from(["B_plus", "D_plus"]))
    def test_positive_and_exact_on_integer_scale(self, S, S0, B0, D0, mode):
        d = MixSizeDistribution([(S, 1.0)], S0, B0, D0, mode)
        B, D = derive_step(S, d)
        assert B >= 1 and D >= 1
        scale = Fraction(S0, S) ** 2
        if scale.denominator == 1:
            assert S * S * B * D == S0 * S0 * B0 * D0


class TestSampling:
    def test_point_mass_always_same(self, rng):
        d = point_mass()
        assert {sample_step(d, rng).S for _ in range(200)} == {32}

    def test_same_seed_same_sequence(self):
        d = cifar("B_plus")
        a = [sample_step(d, np.random.default_rng(5), i) for i in range(1)]
        r1, r2 = np.random.default_rng(9), np.random.default_rng(9)
        seq1 = [sample_step(d, r1, i) for i in range(300)]
        seq2 = [sample_step(d, r2, i) for i in range(300)]
        assert seq1 == seq2 and isinstance(a[0], SampledStep)

    def test_vectorized_matches_scalar_law(self):
        d = cifar()
        s1 = sample_sizes(d, np.random.default_rng(3), 50)
        r = np.random.default_rng(3)
        assert len(s1) == 50 and set(s1.tolist()) <= {16, 24, 32, 40}
        assert sample_step(d, r).S in {16, 24, 32, 40}

    def test_chi_square_unbiased(self):
        d = cifar()
        draws = sample_sizes(d, np.random.default_rng(11), 200_000)
        counts = np.array([(draws == s).sum() for s in d.sizes])
        _, pval = stats.chisquare(counts, d.probs * len(draws))
        assert pval > 0.001


class TestMeanStats:
    @pytest.mark.parametrize("name,mean", [("cifar28", 28), ("imagenet144", 144), ("imagenet208", 208),
                                           ("imagenet224", 224)])
    def test_mean_size(self, name, mean):
        assert mean_stats(preset(name))[0] == pytest.approx(mean, abs=1e-9)

    def test_b_plus_mean_batch_enumeration(self):
        # round_half_up(64 * (32/S)^2) for S = 40, 32, 24, 16 is 41, 64, 114, 256
        expected = 0.2 * 41 + 0.3 * 64 + 0.3 * 114 + 0.2 * 256
        assert mean_stats(cifar("B_plus"))[1] == pytest.approx(expected, abs=1e-12)
        assert scaled_learning_rate(0.1, expected, 64) == pytest.approx(0.1 * expected / 64)

    def test_lr_scaling(self):
        assert scaled_learning_rate(0.1, 64, 64) == 0.1
        assert scaled_learning_rate(0.1, 512, 256) == pytest.approx(0.2)


class TestSchedule:
    def test_progressive_cifar_100(self):
        assert progressive_epochs(cifar(), 100) == [(16, 20), (24, 30), (32, 30), (40, 20)]
        sched = make_schedule(cifar(), "progressive", 100, 2)
        sizes = [s.S for s in sched]
        assert sizes[:40] == [16] * 40 and sizes[-40:] == [40] * 40

    @given(st.integers(1, 300))
    def test_progressive_totals(self, E):
        alloc = progressive_epochs(cifar(), E)
        assert sum(e for _, e in alloc) == E
        assert [s for s, _ in alloc] == [16, 24, 32, 40]

    def test_per_epoch_point_mass(self):
        sizes = {s.S for s in make_schedule(point_mass(), "per_epoch", 7, 3, np.random.default_rng(0))}
        assert sizes == {32}

    def test_per_epoch_constant_within_epoch(self):
        sched = make_schedule(cifar("B_plus"), "per_epoch", 10, 5, np.random.default_rng(2))
        steps = list(sched)
        for e in range(10):
            assert len({(s.S, s.B, s.D) for s in steps[5 * e:5 * e + 5]}) == 1
        per_epoch = sorted(steps[5 * e].S for e in range(10))
        assert per_epoch == [16, 16, 24, 24, 24, 32, 32, 32, 40, 40]

    def test_per_step_mean_size(self):
        sched = make_schedule(cifar(), "per_step", 1, 100_000, np.random.default_rng(4))
        assert np.mean([s.S for s in sched]) == pytest.approx(28, abs=0.05)

    def test_unknown_strategy(self):
        with pytest.raises(ValueError):
            make_schedule(cifar(), "sometimes", 1)

    def test_step_indices_increase(self):
        steps = list(make_schedule(cifar(), "per_step", 2, 5, np.random.default_rng(0)))
        assert [s.step_index for s in steps] == list(range(10))


@pytest.mark.parametrize("name", sorted(PRESETS))
@pytest.mark.parametrize("mode", ["B_plus", "D_plus"])
def test_budget_every_preset_size(name, mode):
    d = preset(name, mode)
    for S in d.sizes:
        B, D = derive_step(int(S), d)
        assert budget_error(SampledStep(int(S), B, D), d) <= 0.15


def test_presets_sum_to_one():
    for name in PRESETS:
        p = np.array([q for _, q in PRESETS[name]["entries"]])
        assert abs(p.sum() - 1) <= 1e-9 and np.all(p >= 0)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(8, 64), min_size=1, max_size=5, unique=True), st.integers(0, 10_000))
def test_random_distributions_sample_support(sizes, seed):
    p = np.random.default_rng(seed).dirichlet(np.ones(len(sizes)))
    p[-1] = 1.0 - p[:-1].sum()
    d = MixSizeDistribution(list(zip(sizes, p.tolist())), 32, 64, 1, "B_plus")
    validate(d)
    draws = sample_sizes(d, np.random.default_rng(seed), 100)
    assert set(draws.tolist()) <= set(sizes)
