import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splitsim import sysopt
from splitsim.errors import InputError, PlanError
from splitsim.simnet import ClientProfile
from splitsim.sysopt import (
    CostParams,
    RoundPlan,
    SelectorState,
    UplinkSizes,
    allocate,
    comm_cost,
    comp_cost,
    initial_comm_estimate,
    k_epsilon,
    lr_condition,
    optimal_fractions,
    round_objective,
    round_time,
    select_trainers,
    theory_lr,
    total_cost,
    update_comm_estimate,
    uplink_time,
)


def profile(qc, qs, deadline=1000.0):
    return ClientProfile(qc, qs, deadline, "eMBB")


def grid_oracle(selected, profiles, sizes, costs, e_max, step=1e-4):
    """Best objective on the bandwidth simplex, refined to `step` resolution.

    Exhaustive at the final resolution for two clients; for three or four the
    (convex) makespan term is minimized by nested refinement ending on a
    grid of the same resolution.
    """
    best = math.inf

    def objective(fractions, e):
        plan = RoundPlan(selected, fractions, e)
        return round_objective(plan, profiles, sizes, costs)

    b_min = costs.min_fraction
    k = len(selected)
    for e in range(1, e_max + 1):
        if k == 2:
            values = np.arange(b_min, 1.0 - b_min + step / 2, step)
            for b1 in values:
                b2 = 1.0 - b1
                if b2 < b_min - 1e-12:
                    continue
                best = min(best, objective((float(b1), float(b2)), e))
        else:
            centers = np.full(k, 1.0 / k)
            width = 1.0 - k * b_min
            grid_step = width / 10 if width > 0 else step
            while True:
                lo = np.maximum(b_min, centers - 5 * grid_step)
                axes = [np.arange(lo[i], 1.0, grid_step)[:11] for i in range(k - 1)]
                best_here, best_b = math.inf, None
                for combo in np.stack(np.meshgrid(*axes), axis=-1).reshape(-1, k - 1):
                    rest = 1.0 - combo.sum()
                    if rest < b_min - 1e-12:
                        continue
                    b = tuple(combo.tolist()) + (float(rest),)
                    val = objective(b, e)
                    if val < best_here:
                        best_here, best_b = val, np.array(b)
                centers = best_b
                if grid_step <= step:
                    break
                grid_step = max(step, grid_step / 5)
            best = min(best, best_here)
    return best


class TestCosts:
    def test_comm_cost_direct_substitution(self):
        plan = RoundPlan((0, 1), (0.5, 0.5), 1)
        costs = CostParams(bandwidth_bps=1e9, bandwidth_unit_cost=1.0)
        assert comm_cost(plan, costs) == 1e9

    def test_comm_cost_empty_selection_is_zero(self):
        plan = RoundPlan((), (), 1)
        assert comm_cost(plan, CostParams()) == 0.0

    def test_comm_cost_is_budget_times_price_for_any_valid_plan(self):
        rng = np.random.default_rng(0)
        costs = CostParams(bandwidth_bps=1e9, bandwidth_unit_cost=2.5, min_fraction=0.01)
        for _ in range(20):
            k = int(rng.integers(1, 8))
            raw = rng.uniform(0.1, 1.0, size=k)
            fractions = tuple(float(b) for b in raw / raw.sum())
            plan = RoundPlan(tuple(range(k)), fractions, 3)
            assert math.isclose(comm_cost(plan, costs), 2.5e9, rel_tol=1e-12)

    def test_comp_cost_substitution(self):
        plan = RoundPlan((0,), (1.0,), 10)
        costs = CostParams(compute_unit_cost=1.0)
        assert math.isclose(comp_cost(plan, [profile(0.4, 1.4)], costs), 18.0, rel_tol=1e-12)

    def test_zero_local_updates_disallowed(self):
        with pytest.raises(PlanError):
            RoundPlan((0,), (1.0,), 0)

    def test_comp_cost_linear_in_clients(self):
        profiles = [profile(0.4, 1.4)] * 3
        single = comp_cost(RoundPlan((0,), (1.0,), 5), profiles, CostParams())
        triple = comp_cost(RoundPlan.uniform((0, 1, 2), 5), profiles, CostParams())
        assert math.isclose(triple, 3 * single, rel_tol=1e-12)


class TestLatency:
    def test_uplink_time_substitution(self):
        sizes = UplinkSizes((1e6,))
        costs = CostParams(bandwidth_bps=1e9)
        assert math.isclose(uplink_time(0, 0.5, sizes, costs), 2.0, rel_tol=1e-12)

    def test_doubling_bandwidth_halves_time(self):
        sizes = UplinkSizes((3.7e6,))
        costs = CostParams()
        assert math.isclose(
            uplink_time(0, 0.2, sizes, costs), 2 * uplink_time(0, 0.4, sizes, costs), rel_tol=1e-12
        )

    def test_zero_fraction_for_selected_client_is_a_plan_error(self):
        with pytest.raises(PlanError):
            uplink_time(0, 0.0, UplinkSizes((1e6,)), CostParams())

    def test_uplink_time_arithmetic_oracle(self):
        rng = np.random.default_rng(1)
        costs = CostParams(bandwidth_bps=5e8)
        for _ in range(25):
            bits = float(rng.uniform(1e4, 1e8))
            b = float(rng.uniform(0.05, 1.0))
            expected = bits / (b * 5e8) * 1e3
            assert math.isclose(uplink_time(0, b, UplinkSizes((bits,)), costs), expected, rel_tol=1e-12)

    def test_round_time_single_client_sums_phases(self):
        profiles = [profile(0.4, 1.4)]
        sizes = UplinkSizes((1e6,))
        costs = CostParams(bandwidth_bps=1e9)
        total, phases = round_time(RoundPlan((0,), (1.0,), 10), profiles, sizes, costs)
        assert math.isclose(total, 10 * 0.4 + 1.0 + 10 * 1.4, rel_tol=1e-12)
        assert len(phases) == 1

    def test_round_time_dominant_client_wins_both_maxima(self):
        profiles = [profile(0.3, 1.2), profile(0.5, 1.6)]
        sizes = UplinkSizes((1e5, 1e6))
        costs = CostParams(bandwidth_bps=1e9)
        total, _ = round_time(RoundPlan.uniform((0, 1), 10), profiles, sizes, costs)
        expected = 10 * 0.5 + 1e6 / (0.5 * 1e6) + 10 * 1.6
        assert math.isclose(total, expected, rel_tol=1e-12)

    def test_round_time_matches_exhaustive_max_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            k = int(rng.integers(1, 6))
            profiles = [profile(float(rng.uniform(0.3, 0.5)), float(rng.uniform(1.2, 1.6))) for _ in range(k)]
            raw = rng.uniform(0.1, 1.0, size=k)
            fr = tuple(float(b) for b in raw / raw.sum())
            sizes = UplinkSizes(tuple(float(rng.uniform(1e4, 1e7)) for _ in range(k)))
            e = int(rng.integers(1, 20))
            plan = RoundPlan(tuple(range(k)), fr, e)
            costs = CostParams()
            total, _ = round_time(plan, profiles, sizes, costs)
            uplinks = [sizes.payload_bits[m] / (fr[m] * costs.bandwidth_bpms) for m in range(k)]
            expected = max(e * profiles[m].client_batch_ms + uplinks[m] for m in range(k)) + max(
                e * p.server_batch_ms for p in profiles
            )
            assert math.isclose(total, expected, rel_tol=1e-12)


class TestTotalCost:
    def _setup(self):
        profiles = [profile(0.4, 1.3), profile(0.35, 1.5)]
        sizes = UplinkSizes((2e6, 3e6))
        plan = RoundPlan.uniform((0, 1), 5)
        return plan, profiles, sizes

    def test_tradeoff_one_is_pure_resource_cost(self):
        plan, profiles, sizes = self._setup()
        costs = CostParams(tradeoff=1.0)
        expected = comm_cost(plan, costs) + comp_cost(plan, profiles, costs)
        assert math.isclose(total_cost(plan, profiles, sizes, costs), expected, rel_tol=1e-12)

    def test_tradeoff_zero_is_pure_time(self):
        plan, profiles, sizes = self._setup()
        costs = CostParams(tradeoff=0.0)
        expected = round_time(plan, profiles, sizes, costs)[0]
        assert math.isclose(total_cost(plan, profiles, sizes, costs), expected, rel_tol=1e-12)

    def test_default_tradeoff_matches_independent_recomputation(self):
        plan, profiles, sizes = self._setup()
        costs = CostParams()
        rco = sum(b * 1e9 * 1.0 for b in plan.fractions)
        rcp = sum(5 * (p.client_batch_ms + p.server_batch_ms) for p in profiles)
        t = max(
            5 * profiles[m].client_batch_ms + sizes.payload_bits[m] / (0.5 * 1e6)
            for m in (0, 1)
        ) + max(5 * p.server_batch_ms for p in profiles)
        expected = 0.8 * (rco + rcp) + 0.2 * t
        assert math.isclose(total_cost(plan, profiles, sizes, costs), expected, rel_tol=1e-12)


class TestKEpsilon:
    def test_formula_at_one(self):
        costs = CostParams(round_constant=1.0, target_accuracy=1.0)
        assert k_epsilon(1, costs) == 4

    def test_limit_for_large_updates(self):
        costs = CostParams(round_constant=2.0, target_accuracy=0.5)
        floor = math.ceil(2.0 / 0.25)
        assert abs(k_epsilon(10**6, costs) - floor) <= 1

    def test_monotone_non_increasing_and_formula_strictly_decreasing(self):
        costs = CostParams(round_constant=1.0, target_accuracy=0.1)
        values = [k_epsilon(e, costs) for e in range(1, 101)]
        assert all(a >= b for a, b in zip(values, values[1:]))
        raw = [(e + 1.0) ** 2 / (e * e * 0.01) for e in range(1, 101)]
        assert all(a > b for a, b in zip(raw, raw[1:]))
        floor = math.ceil(1.0 / 0.01)
        assert all(v >= floor for v in values)


class TestSelection:
    def test_feasible_client_is_selected(self):
        profiles = [ClientProfile(0.9, 0.9, 90.0, "eMBB")]
        sel = SelectorState(comm_estimate_ms=70.0, last_local_updates=10)
        assert select_trainers(profiles, sel, 10) == (0,)  # 18 + 70 <= 90

    def test_deadline_violator_is_excluded(self):
        profiles = [ClientProfile(0.9, 0.9, 80.0, "eMBB")]
        sel = SelectorState(comm_estimate_ms=70.0, last_local_updates=10)
        assert select_trainers(profiles, sel, 10) == ()

    def test_estimate_update_arithmetic(self):
        sel = SelectorState(comm_estimate_ms=100.0, last_local_updates=5, smoothing=0.7)
        updated = update_comm_estimate(sel, 50.0)
        assert math.isclose(updated.comm_estimate_ms, 85.0, rel_tol=1e-12)

    def test_initial_estimate_is_uniform_allocation_worst_case(self):
        sizes = UplinkSizes((1e6, 2e6, 5e5))
        costs = CostParams(bandwidth_bps=1e9)
        # 3 clients, uniform fractions: max over m of 3 * bits / B
        assert math.isclose(initial_comm_estimate(sizes, costs), 3 * 2e6 / 1e6, rel_tol=1e-12)


class TestAllocate:
    def _costs(self, **kw):
        defaults = dict(
            bandwidth_bps=1e9,
            tradeoff=0.8,
            min_fraction=0.02,
            round_constant=1.0,
            target_accuracy=0.1,
        )
        defaults.update(kw)
        return CostParams(**defaults)

    def test_identical_clients_get_uniform_bandwidth(self):
        profiles = [profile(0.4, 1.4)] * 4
        sizes = UplinkSizes((2e6,) * 4)
        fr = optimal_fractions((0, 1, 2, 3), profiles, sizes, self._costs(), 10)
        assert np.allclose(fr, 0.25, atol=1e-12)
        assert math.isclose(sum(fr), 1.0, rel_tol=1e-12)

    def test_two_asymmetric_clients_match_grid_oracle(self):
        rng = np.random.default_rng(3)
        profiles = [profile(0.35, 1.25), profile(0.45, 1.55)]
        sizes = UplinkSizes((float(rng.uniform(1e6, 8e6)), float(rng.uniform(1e6, 8e6))))
        costs = self._costs(bandwidth_bps=1e8, tradeoff=0.5)
        plan = allocate((0, 1), profiles, sizes, costs, 4)
        got = round_objective(plan, profiles, sizes, costs)
        oracle = grid_oracle((0, 1), profiles, sizes, costs, 4)
        assert abs(got - oracle) / oracle < 1e-3

    def test_local_updates_never_exceed_cap_and_never_increase(self):
        profiles = [profile(0.4, 1.4), profile(0.36, 1.3)]
        sizes = UplinkSizes((4e6, 2e6))
        costs = self._costs()
        cap = 20
        for _ in range(5):
            plan = allocate((0, 1), profiles, sizes, costs, cap)
            assert 1 <= plan.local_updates <= cap
            cap = plan.local_updates

    def test_never_worse_than_uniform_bandwidth(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            k = int(rng.integers(2, 5))
            profiles = [
                profile(float(rng.uniform(0.34, 0.46)), float(rng.uniform(1.2, 1.6)))
                for _ in range(k)
            ]
            sizes = UplinkSizes(tuple(float(rng.uniform(1e5, 1e7)) for _ in range(k)))
            costs = self._costs(bandwidth_bps=float(rng.uniform(1e8, 1e9)))
            e_cap = int(rng.integers(1, 12))
            plan = allocate(tuple(range(k)), profiles, sizes, costs, e_cap)
            for e in range(1, e_cap + 1):
                uniform = RoundPlan.uniform(tuple(range(k)), e)
                fr = optimal_fractions(tuple(range(k)), profiles, sizes, costs, e)
                tuned = RoundPlan(tuple(range(k)), fr, e)
                assert round_objective(tuned, profiles, sizes, costs) <= round_objective(
                    uniform, profiles, sizes, costs
                ) * (1 + 1e-12)
            assert round_objective(plan, profiles, sizes, costs) <= round_objective(
                RoundPlan.uniform(tuple(range(k)), plan.local_updates), profiles, sizes, costs
            ) * (1 + 1e-12)

    def test_emitted_plans_satisfy_constraints(self):
        rng = np.random.default_rng(5)
        costs = self._costs()
        for _ in range(20):
            k = int(rng.integers(1, 6))
            profiles = [
                profile(float(rng.uniform(0.34, 0.46)), float(rng.uniform(1.2, 1.6)))
                for _ in range(k)
            ]
            sizes = UplinkSizes(tuple(float(rng.uniform(1e5, 1e7)) for _ in range(k)))
            plan = allocate(tuple(range(k)), profiles, sizes, costs, int(rng.integers(1, 20)))
            assert abs(math.fsum(plan.fractions) - 1.0) <= 1e-12
            assert all(b >= costs.min_fraction - 1e-15 for b in plan.fractions)

    def test_infeasible_minimum_fraction_is_a_plan_error(self):
        profiles = [profile(0.4, 1.4)] * 3
        sizes = UplinkSizes((1e6,) * 3)
        with pytest.raises(PlanError):
            optimal_fractions((0, 1, 2), profiles, sizes, self._costs(min_fraction=0.5), 5)

    def test_empty_selection_is_a_plan_error(self):
        with pytest.raises(PlanError):
            allocate((), [], UplinkSizes(()), self._costs(), 5)


class TestTheoryUtilities:
    def test_tiny_rate_always_satisfies_the_condition(self):
        assert lr_condition(1e-9, 5.0, 100, 10.0)

    def test_unit_rate_fails_the_condition(self):
        # -0.5 + 8 + 2 = 9.5 > 0
        assert not lr_condition(1.0, 1.0, 1, 1.0)

    def test_bisection_root_sits_on_the_boundary(self):
        lam, e, l = 2.0, 5, 1.5

        def h(eta):
            return -eta / 2 + 8 * lam * e * e * l * l * eta**3 + 2 * lam * eta * eta * l

        lo, hi = 1e-12, 1.0
        assert h(lo) < 0 < h(hi)
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if h(mid) <= 0:
                lo = mid
            else:
                hi = mid
        assert abs(h(lo)) <= 1e-12
        assert lr_condition(lo * (1 - 1e-9), lam, e, l)
        assert not lr_condition(hi * (1 + 1e-9), lam, e, l)

    def test_theory_lr_substitution(self):
        assert math.isclose(theory_lr(1, 1, 1.0, [1.0], 1.0), 1.0 / 3.0, rel_tol=1e-12)

    def test_quadrupling_rounds_halves_the_rate(self):
        base = theory_lr(10, 4, 2.0, [0.5, 0.5], 1.3)
        assert math.isclose(theory_lr(40, 4, 2.0, [0.5, 0.5], 1.3), base / 2, rel_tol=1e-12)

    def test_smaller_bound_gives_larger_rate_100_draws(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            t = int(rng.integers(1, 1000))
            e = int(rng.integers(1, 50))
            l = float(rng.uniform(0.1, 10))
            k = int(rng.integers(1, 10))
            q = rng.dirichlet(np.ones(k))
            b1 = float(rng.uniform(0.01, 5))
            b2 = b1 + float(rng.uniform(0.01, 5))
            assert theory_lr(t, e, l, q, b1) > theory_lr(t, e, l, q, b2)

    def test_weights_must_sum_to_one(self):
        with pytest.raises(InputError):
            theory_lr(1, 1, 1.0, [0.5, 0.6], 1.0)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_plan_invariants_hold_for_random_allocations(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 7))
    profiles = [
        ClientProfile(float(rng.uniform(0.3, 0.6)), float(rng.uniform(1.0, 2.0)), 100.0, "uRLLC")
        for _ in range(k)
    ]
    sizes = UplinkSizes(tuple(float(rng.uniform(0, 1e7)) for _ in range(k)))
    costs = CostParams(min_fraction=1.0 / max(8, k))
    plan = allocate(tuple(range(k)), profiles, sizes, costs, int(rng.integers(1, 25)))
    assert abs(math.fsum(plan.fractions) - 1.0) <= 1e-12
    assert all(b >= costs.min_fraction - 1e-15 for b in plan.fractions)
    assert plan.local_updates >= 1
