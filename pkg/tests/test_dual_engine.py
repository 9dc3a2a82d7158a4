import json
import math

import pytest

from dual_engine import (ActiveLabelQuery, DualEvent, DualPoint, InfluenceSet, collision_bound,
                         collision_probability_mc, density_trace_deviation, duality_check_exact,
                         export_dual_events, graphical_representation, influence_frame, moment_mc,
                         occupation_agreement_mc, phi2_mc, phi_mc, resolve_active, simulate_limiting_dual,
                         simulate_n_dual)
from mean_field import Profile, integrate
from model_core import BoundaryPolicy, ModelParams
from utils import CapExceeded, replica_rng

P = ModelParams(a=1, b=1, N=10, M=1)


def _profile(value):
    return Profile.constant(3, value, BoundaryPolicy.LOWER)


class TestLimitingDual:
    def test_death_only(self):
        p = ModelParams(a=0, b=0, N=10, M=1)
        for seed in range(20):
            iset = simulate_limiting_dual(p, t_end=1.0, seed=seed)
            assert len(iset.points) == 1
            assert len(iset.live) in (0, 1)
            assert all(e.kind == 'death' for e in iset.events)

    def test_no_outer_births_stay_put(self):
        p = ModelParams(a=2, b=0, N=10, M=1)
        iset = simulate_limiting_dual(p, start_site=3, t_end=1.5, seed=5)
        assert {pt.site for pt in iset.points.values()} == {3}

    def test_outer_births_within_range(self):
        p = ModelParams(a=0, b=3, N=10, M=2)
        iset = simulate_limiting_dual(p, t_end=1.0, seed=9)
        for event in iset.events:
            if event.kind == 'outer':
                assert 1 <= abs(event.target - event.site) <= 2

    def test_deterministic(self):
        first = simulate_limiting_dual(P, t_end=1.0, seed=3)
        second = simulate_limiting_dual(P, t_end=1.0, seed=3)
        assert first.live_signature() == second.live_signature()

    def test_cap_truncates(self):
        p = ModelParams(a=6, b=4, N=10, M=1)
        truncated = [simulate_limiting_dual(p, t_end=3.0, seed=s, cap=5).truncated for s in range(20)]
        assert any(truncated)

    def test_window_freezes_points(self):
        p = ModelParams(a=0, b=4, N=10, M=1)
        iset = simulate_limiting_dual(p, t_end=1.0, seed=2, window=(0, 0))
        frozen = {pt.label for pt in iset.points.values() if pt.frozen}
        assert all(pt.site != 0 for pt in iset.points.values() if pt.frozen)
        assert not any(e.clock in frozen for e in iset.events)


class TestNDual:
    def test_single_bucket_collides_at_start(self):
        iset = simulate_n_dual(P, N=1, pair=True, t_end=1.0, seed=1)
        assert iset.collision_time == 0.0
        assert iset.collided

    def test_matches_limiting_dual_without_collision(self):
        checked = 0
        for seed in range(10):
            limiting = simulate_limiting_dual(P, t_end=1.0, seed=seed)
            n_dual = simulate_n_dual(P, N=10 ** 6, t_end=1.0, seed=seed)
            if n_dual.collided:
                continue
            assert n_dual.live_signature() == limiting.live_signature()
            checked += 1
        assert checked > 0

    def test_rejects_bad_capacity(self):
        with pytest.raises(ValueError):
            simulate_n_dual(P, N=0)


class TestResolveActive:
    def _root(self, mark=0.3, died=None):
        return DualPoint(1, 0, mark, 1, 0, 1, 0.0, died=died)

    def test_alive_root_with_good_mark(self):
        iset = InfluenceSet({1: self._root()}, [], 1.0, (1,))
        assert resolve_active(ActiveLabelQuery(_profile(0.5)), iset)

    def test_alive_root_with_bad_mark(self):
        iset = InfluenceSet({1: self._root(mark=0.7)}, [], 1.0, (1,))
        assert not resolve_active(ActiveLabelQuery(_profile(0.5)), iset)

    def test_dead_root(self):
        iset = InfluenceSet({1: self._root(died=0.4)}, [DualEvent(0.4, 'death', 1, 0, removed=(1,))],
                            1.0, (1,))
        assert not resolve_active(ActiveLabelQuery(_profile(1.0)), iset)

    def _branched(self, second_mark):
        points = {
            1: self._root(mark=0.9, died=0.6),
            2: DualPoint(2, 0, 0.1, 2, 1, 2, 0.2),
            3: DualPoint(3, 0, second_mark, 2, 1, 3, 0.2),
        }
        events = [
            DualEvent(0.2, 'inner', 1, 0, 0, 2, (2, 3), (2, 3), (0.1, second_mark)),
            DualEvent(0.6, 'death', 1, 0, removed=(1,)),
        ]
        return InfluenceSet(points, events, 1.0, (1,))

    def test_pairing_rule(self):
        query = ActiveLabelQuery(_profile(0.5))
        assert resolve_active(query, self._branched(0.2))
        assert query.active == {1, 2, 3}

    def test_pairing_needs_both_children(self):
        assert not resolve_active(ActiveLabelQuery(_profile(0.5)), self._branched(0.8))

    def test_truncated_rejected(self):
        iset = InfluenceSet({1: self._root()}, [], 1.0, (1,), truncated=True)
        with pytest.raises(ValueError):
            resolve_active(ActiveLabelQuery(_profile(0.5)), iset)


class TestPhi:
    def test_time_zero_is_leaf_rule(self):
        est = phi_mc(P, _profile(0.3), t=0.0, replicas=2000, seed=4)
        assert est.within(0.3, 4)

    def test_pair_start_at_time_zero(self):
        est = phi2_mc(P, _profile(0.6), t=0.0, replicas=2000, seed=4)
        assert est.within(0.36, 4)

    def test_lazy_and_full_agree(self):
        u = _profile(0.6)
        lazy = phi_mc(P, u, t=0.5, replicas=2000, seed=11)
        full = phi_mc(P, u, t=0.5, replicas=2000, seed=12, method='full')
        assert abs(lazy.value - full.value) <= 4 * math.hypot(lazy.se, full.se)

    def test_argument_checks(self):
        with pytest.raises(ValueError):
            phi_mc(P, _profile(0.5), method='exact')
        with pytest.raises(ValueError):
            phi_mc(P, _profile(0.5), N=100)

    def test_strict_cap(self):
        p = ModelParams(a=6, b=4, N=10, M=1)
        with pytest.raises(CapExceeded):
            phi_mc(p, _profile(0.0), t=3.0, replicas=20, method='full', cap=3, strict=True)

    def test_matches_flow_short_time(self):
        p = ModelParams(a=2, b=1, N=10, M=1)
        u = Profile.constant(10, 0.6, BoundaryPolicy.UPPER)
        est = phi_mc(p, u, t=0.5, replicas=2000, seed=19)
        assert est.within(integrate(p, u, 0.5).at(0), 4)

    @pytest.mark.slow
    def test_matches_mean_field_flow(self):
        p = ModelParams(a=6, b=2, N=10, M=1)
        u = Profile.constant(30, 0.6, BoundaryPolicy.UPPER)
        est = phi_mc(p, u, t=1.0, replicas=4000, seed=21)
        assert est.within(integrate(p, u, 1.0).at(0), 4)


class TestCollision:
    def test_bound_value(self):
        assert collision_bound(1, 1, 1, 1000) == pytest.approx((2 * math.exp(4) + 1) / 10)

    def test_no_births_rarely_collide(self):
        p = ModelParams(a=0, b=0, N=10, M=1)
        est = collision_probability_mc(p, 10 ** 6, 1.0, replicas=500, seed=3)
        assert est.value <= collision_bound(0, 0, 1.0, 10 ** 6)

    def test_small_capacity_collides(self):
        est = collision_probability_mc(P, 1, 1.0, replicas=50, seed=3)
        assert est.value == 1.0


class TestMoment:
    def test_death_only(self):
        p = ModelParams(a=0, b=0, N=10, M=1)
        est, target = moment_mc(p, 0.5, 1.0, replicas=4000, seed=8)
        assert target == pytest.approx(math.exp(-1.0))
        assert est.within(target, 4)

    @pytest.mark.slow
    def test_branching(self):
        p = ModelParams(a=0.5, b=0.5, N=10, M=1)
        est, target = moment_mc(p, 0.5, 0.5, replicas=20000, seed=8)
        assert target == pytest.approx(math.exp((1 + 2 * 0.5 * math.cosh(0.5) - 1) * 0.5))
        assert est.within(target, 4)


class TestDualityCheck:
    def test_random_representations(self):
        p = ModelParams(a=2, b=1, N=10, M=1)
        assert all(duality_check_exact(p, 2, 2, 1.0, seed=7, replica=i) for i in range(50))

    def test_three_patches(self):
        p = ModelParams(a=1.5, b=2, N=10, M=1)
        assert all(duality_check_exact(p, 3, 3, 0.5, seed=7, replica=i) for i in range(10))

    def test_death_only(self):
        p = ModelParams(a=0, b=0, N=10, M=1)
        assert all(duality_check_exact(p, 2, 1, 2.0, seed=1, replica=i) for i in range(20))

    def test_empty_start(self):
        assert duality_check_exact(P, 2, 2, 1.0, seed=1, initial_density=0.0)

    @pytest.mark.parametrize("patches", [1, 2, 3])
    def test_single_slot_patches(self, patches):
        assert all(duality_check_exact(P, 1, patches, 1.0, seed=3, replica=i) for i in range(20))

    def test_single_slot_has_only_deaths(self):
        events = graphical_representation(ModelParams(a=5, b=5, N=10, M=1), 1, 3, 2.0, replica_rng(3, 0))
        assert events and all(ev.kind == 'death' for ev in events)

    def test_size_guard(self):
        with pytest.raises(ValueError):
            duality_check_exact(P, 4, 2, 1.0)
        with pytest.raises(ValueError):
            duality_check_exact(P, 0, 2, 1.0)
        with pytest.raises(ValueError):
            duality_check_exact(P, 2, 2, 3.0)


class TestAgreement:
    def test_small_run(self):
        p = ModelParams(a=2, b=1, N=10, M=1)
        result = occupation_agreement_mc(p, 50, t=0.5, replicas=100, K=3, seed=5)
        assert 0 <= result.density.value <= 1
        assert result.deviation == pytest.approx(abs(result.density.value - result.phi.value))
        assert result.bound == pytest.approx(2 * result.collision.value / 0.01)
        assert set(result.to_dict()) >= {'density', 'phi', 'collision', 'bound', 'holds'}

    def test_variant_checked(self):
        with pytest.raises(ValueError):
            occupation_agreement_mc(P, 50, variant='exact')

    def test_deviation_within_collision_probability(self):
        p = ModelParams(a=2, b=1, N=10, M=1)
        result = occupation_agreement_mc(p, 100, t=0.5, replicas=200, K=3, seed=9)
        assert result.holds
        noise = 4 * math.sqrt(result.density.se ** 2 + result.phi.se ** 2 + result.collision.se ** 2)
        assert result.deviation <= result.collision.value + noise

    @pytest.mark.slow
    def test_chebyshev_bound_holds(self):
        p = ModelParams(a=2, b=1, N=10, M=1)
        result = occupation_agreement_mc(p, 500, t=0.5, replicas=400, K=3, seed=5)
        assert result.holds

    def test_density_trace_needs_isolated_patch(self):
        with pytest.raises(ValueError):
            density_trace_deviation(P, 100, 1.0)

    @pytest.mark.slow
    def test_density_trace_shrinks(self):
        p = ModelParams(a=2, b=0, N=10, M=1)
        assert density_trace_deviation(p, 2000, 2.0, seed=3) < 0.1


def test_exports(tmp_path):
    iset = simulate_limiting_dual(P, t_end=1.0, seed=13)
    path = export_dual_events(iset, tmp_path / 'dual.jsonl')
    lines = open(path).read().splitlines()
    assert len(lines) == len(iset.events)
    for line in lines:
        assert set(json.loads(line)) == {'t', 'kind', 'labels', 'sites', 'marks', 'generation'}
    frame = influence_frame(iset)
    assert len(frame) == len(iset.points)
    assert frame['label'].is_unique
