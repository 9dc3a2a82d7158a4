from fractions import Fraction

import numpy as np
import pytest

from isolated_patch import (BirthDeathSpec, collision_mc, collision_probability_bound, dominating_occupation_times,
                            dominating_visits, expected_visits, export_count_mean, export_occupation_table,
                            extinction_time_cdf, occupation_table, occupation_times_exact, survival_upper_bound,
                            weighted_occupation_bound)
from model_core import ModelParams


class TestBirthDeathSpec:
    def test_exact_rates(self):
        spec = BirthDeathSpec.exact(2, 3)
        assert spec.up == pytest.approx([0, 0, 2 / 3, 0])
        assert spec.down == [0, 1, 2, 3]

    def test_dominating_truncated_at_top(self):
        spec = BirthDeathSpec.dominating(Fraction(2), 4, rational=True)
        assert spec.up == [0, Fraction(1, 2), 1, Fraction(3, 2), 0]

    def test_dominates_exact(self):
        for a in (1.0, 4.0, 7.0):
            exact = BirthDeathSpec.exact(a, 8)
            upper = BirthDeathSpec.dominating(a, 8)
            assert all(e <= d + 1e-12 for e, d in zip(exact.up, upper.up))

    def test_validate(self):
        with pytest.raises(ValueError):
            BirthDeathSpec(2, [1, 0, 0], [0, 1, 2], 'custom').validate()
        with pytest.raises(ValueError):
            BirthDeathSpec(2, [0, 0], [0, 1], 'custom').validate()


class TestOccupationTimes:
    def test_pure_death(self):
        tau = occupation_times_exact(BirthDeathSpec.exact(0, 5, rational=True), exact=True)
        assert tau == [Fraction(1, j) for j in range(1, 6)]

    def test_float_matches_rational(self):
        floats = expected_visits(BirthDeathSpec.exact(3, 6))
        exact = expected_visits(BirthDeathSpec.exact(3, 6, rational=True), exact=True)
        assert np.allclose(floats, [float(v) for v in exact], rtol=1e-12)

    def test_small_chain_by_hand(self):
        # from 3 the chain steps to 2, returns to 3 with probability 1/4, and 1 is never left upwards
        tau = occupation_times_exact(BirthDeathSpec.exact(2, 3, rational=True), exact=True)
        assert tau == [Fraction(1), Fraction(1, 2), Fraction(4, 9)]

    def test_dominating_visits_geometric(self):
        v = dominating_visits(Fraction(2), 6)
        assert v == [sum(Fraction(1, 2) ** i for i in range(j + 1)) for j in range(7)]

    def test_dominating_pure_death(self):
        sigma = dominating_occupation_times(0, 5)
        assert np.allclose(sigma, [1 / j for j in range(1, 6)])

    def test_weighted_bound_pure_death(self):
        assert weighted_occupation_bound(0, 7) == 7
        tau = occupation_times_exact(BirthDeathSpec.exact(0, 7))
        assert sum(j * t for j, t in enumerate(tau, start=1)) == pytest.approx(7)

    def test_weighted_bound_value(self):
        assert weighted_occupation_bound(Fraction(2), 3) == Fraction(41, 8)

    @pytest.mark.parametrize("a", [0.5, 2.0, 4.0])
    @pytest.mark.parametrize("N", [2, 3, 5, 8])
    def test_weighted_bound_dominates(self, a, N):
        tau = occupation_times_exact(BirthDeathSpec.exact(a, N))
        weighted = sum(j * t for j, t in enumerate(tau, start=1))
        assert weighted <= weighted_occupation_bound(a, N) + 1e-9

    def test_weighted_bound_rejects_negative(self):
        with pytest.raises(ValueError):
            weighted_occupation_bound(-1, 3)


class TestExportBound:
    def test_no_outer_births(self):
        bound = export_count_mean(3, 0, 6)
        assert bound.closed_form == 0 and bound.exact == 0

    def test_subcritical_branch(self):
        bound = export_count_mean(2, 1, 5)
        assert bound.branch == 'a<4'
        assert bound.closed_form == pytest.approx(10.0)

    def test_critical_branch(self):
        bound = export_count_mean(4, 1, 4)
        assert bound.branch == 'a=4'
        assert bound.closed_form == pytest.approx(18.0)

    def test_supercritical_branch(self):
        bound = export_count_mean(6, 1, 3)
        assert bound.branch == 'a>4'
        assert bound.closed_form == pytest.approx(4 * 1.5 ** 5)

    def test_exact_by_hand(self):
        assert export_count_mean(2, 1, 3).exact == pytest.approx((2 * 0.5 + 6 * 4 / 9) / 2)

    @pytest.mark.parametrize("a", [0.0, 1.0, 3.0, 4.0])
    def test_exact_below_closed_form(self, a):
        for N in (2, 4, 10):
            bound = export_count_mean(a, 2.0, N)
            assert bound.exact <= bound.closed_form + 1e-9


class TestCollisionBound:
    def test_million(self):
        bound = collision_probability_bound(10 ** 6)
        assert bound.m == 100
        assert bound.simplified == pytest.approx(0.005)
        assert bound.power == pytest.approx(1 - (1 - 5e-5) ** 100)
        assert bound.product <= bound.power <= bound.simplified
        assert bound.chain_holds

    def test_small_m(self):
        bound = collision_probability_bound(8)
        assert bound.m == 2
        assert bound.product == pytest.approx(1 / 16)
        assert bound.chain_holds

    def test_ladder_over_range(self):
        bounds = [collision_probability_bound(M) for M in (10 ** 2, 10 ** 3, 10 ** 4, 10 ** 6)]
        assert [b.m for b in bounds] == [4, 10, 21, 100]
        assert all(b.chain_holds for b in bounds)
        for small, large in zip(bounds, bounds[1:]):
            assert large.simplified < small.simplified
            assert large.power < small.power
        assert bounds[1].power == pytest.approx(1 - 0.995 ** 10)

    def test_single_export(self):
        assert collision_probability_bound(1).product == 0.0

    def test_rejects_zero(self):
        with pytest.raises(ValueError):
            collision_probability_bound(0)


class TestSurvivalBound:
    def test_subcritical_example(self):
        assert survival_upper_bound(ModelParams(a=2, b=1, N=5, M=10 ** 6)) == pytest.approx(0.105)

    def test_critical_example(self):
        assert survival_upper_bound(ModelParams(a=4, b=1, N=4, M=10 ** 9)) == pytest.approx(0.0185)

    def test_decreasing_in_range(self):
        bounds = [survival_upper_bound(ModelParams(a=2, b=1, N=5, M=m)) for m in (10 ** 3, 10 ** 6, 10 ** 9)]
        assert bounds[0] >= bounds[1] >= bounds[2]
        assert bounds[0] == 1.0


class TestCollisionMC:
    def test_no_exports(self):
        est = collision_mc(ModelParams(a=2, b=0, N=5, M=10), replicas=10)
        assert est.value == 0.0

    def test_below_bound(self):
        p = ModelParams(a=2, b=1, N=5, M=10 ** 6)
        est = collision_mc(p, replicas=2000, seed=3)
        assert est.value <= survival_upper_bound(p)

    def test_crowded_targets(self):
        est = collision_mc(ModelParams(a=2, b=5, N=5, M=1), replicas=500, seed=3)
        assert est.value > 0.5

    def test_exports_ignore_target_vacancy(self):
        # two target patches and about 200 exports per death: a repeat target is near certain
        est = collision_mc(ModelParams(a=0, b=200, N=2, M=1), replicas=300, seed=5)
        assert est.value > 0.95


class TestExtinctionCdf:
    def test_limits(self):
        cdf = extinction_time_cdf(BirthDeathSpec.exact(2, 5), [0.0, 1.0, 5.0, 100.0])
        assert cdf[0] == pytest.approx(0.0, abs=1e-12)
        assert np.all(np.diff(cdf) >= 0)
        assert cdf[-1] == pytest.approx(1.0, abs=1e-9)

    def test_single_individual(self):
        cdf = extinction_time_cdf(BirthDeathSpec.exact(0, 2), [1.0])
        # pure death from 2: maximum of two unit exponentials
        assert cdf[0] == pytest.approx((1 - np.exp(-1.0)) ** 2)


def test_occupation_table(tmp_path):
    frame = occupation_table(2.0, 4)
    assert list(frame.columns) == ['j', 'tau_exact', 'v_dominating', 'sigma_dominating']
    assert frame['j'].tolist() == [1, 2, 3, 4]
    path = export_occupation_table(2.0, 4, tmp_path / 'occupation.csv')
    assert open(path).readline().strip() == 'j,tau_exact,v_dominating,sigma_dominating'
