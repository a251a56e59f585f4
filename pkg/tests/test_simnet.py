import math

import numpy as np
import pytest

from splitsim import simnet, sysopt
from splitsim.errors import InputError
from splitsim.protocol import DOWNLINK, UPLINK, TransferLedger
from splitsim.simnet import (
    SLICE_TAGS,
    SimClock,
    batchwise_round_time,
    execute_round,
    sample_profiles,
    skipped_record,
    volume_report,
)
from splitsim.sysopt import CostParams, RoundPlan, UplinkSizes


class TestProfiles:
    def test_same_seed_identical(self):
        assert sample_profiles(10, seed=3) == sample_profiles(10, seed=3)

    def test_draws_stay_in_their_ranges(self):
        profiles = sample_profiles(50, seed=0)
        assert len(profiles) == 50
        for p in profiles:
            assert 0.34 <= p.client_batch_ms <= 0.46
            assert 1.2 <= p.server_batch_ms <= 1.6
            assert 50.0 <= p.deadline_ms <= 100.0

    def test_slice_tags_rotate(self):
        profiles = sample_profiles(7, seed=1)
        assert tuple(p.slice_tag for p in profiles[:3]) == SLICE_TAGS
        assert profiles[3].slice_tag == SLICE_TAGS[0]

    def test_nonpositive_ranges_rejected(self):
        with pytest.raises(InputError):
            sample_profiles(3, seed=0, client_batch_ms=(0.0, 0.4))


def _world():
    profiles = sample_profiles(3, seed=2)
    costs = CostParams(bandwidth_bps=1e9, min_fraction=0.1)
    sizes = UplinkSizes((2e6, 3e6, 1e6))
    return profiles, costs, sizes


class TestExecuteRound:
    def test_accounting_accrues_even_when_learning_is_frozen(self):
        profiles, costs, sizes = _world()
        clock = SimClock()
        ledger = TransferLedger()
        plan = RoundPlan.uniform((0, 1), 5)

        record = execute_round(
            plan, profiles, sizes, costs, lambda: 0.75,
            clock=clock, ledger=ledger, protocol="splitme",
        )
        assert record.loss == 0.75
        assert record.total_ms > 0
        assert clock.elapsed_ms == record.total_ms
        assert record.comm_cost == sysopt.comm_cost(plan, costs)

    def test_two_identical_rounds_exactly_double_the_clock(self):
        profiles, costs, sizes = _world()
        clock = SimClock()
        ledger = TransferLedger()
        plan = RoundPlan.uniform((0, 2), 4)
        r1 = execute_round(plan, profiles, sizes, costs, lambda: 0.1,
                           clock=clock, ledger=ledger, protocol="splitme")
        r2 = execute_round(plan, profiles, sizes, costs, lambda: 0.1,
                           clock=clock, ledger=ledger, protocol="splitme")
        assert r1.total_ms == r2.total_ms
        assert clock.elapsed_ms == 2 * r1.total_ms
        assert clock.round_index == 2

    def test_matches_independent_recomputation(self):
        rng = np.random.default_rng(4)
        profiles, costs, sizes = _world()
        for _ in range(10):
            k = int(rng.integers(1, 4))
            chosen = tuple(sorted(rng.choice(3, size=k, replace=False).tolist()))
            raw = rng.uniform(0.2, 1.0, size=k)
            plan = RoundPlan(chosen, tuple(float(x) for x in raw / raw.sum()), int(rng.integers(1, 9)))
            record = execute_round(plan, profiles, sizes, costs, lambda: 0.0,
                                   clock=SimClock(), ledger=TransferLedger(), protocol="x")
            e = plan.local_updates
            up = {m: sizes.payload_bits[m] / (b * costs.bandwidth_bpms) for m, b in zip(chosen, plan.fractions)}
            expected_t = max(e * profiles[m].client_batch_ms + up[m] for m in chosen) + max(
                e * profiles[m].server_batch_ms for m in chosen
            )
            assert math.isclose(record.total_ms, expected_t, rel_tol=1e-12)
            assert math.isclose(
                record.comp_cost,
                sum(e * (profiles[m].client_batch_ms + profiles[m].server_batch_ms) for m in chosen),
                rel_tol=1e-12,
            )

    def test_round_record_reproducible_from_its_own_fields(self):
        profiles, costs, sizes = _world()
        plan = RoundPlan.uniform((0, 1, 2), 6)
        record = execute_round(plan, profiles, sizes, costs, lambda: 0.2,
                               clock=SimClock(), ledger=TransferLedger(), protocol="x")
        recomputed, _ = sysopt.round_time(
            RoundPlan(record.selected, record.fractions, record.local_updates),
            profiles, sizes, costs,
        )
        assert record.total_ms == recomputed

    def test_full_timing_folds_server_phase_into_client(self):
        profiles, costs, sizes = _world()
        plan = RoundPlan((1,), (1.0,), 3)
        record = execute_round(plan, profiles, sizes, costs, lambda: 0.0,
                               clock=SimClock(), ledger=TransferLedger(),
                               protocol="fedavg", timing="full")
        p = profiles[1]
        expected = 3 * (p.client_batch_ms + p.server_batch_ms) + sizes.payload_bits[1] / costs.bandwidth_bpms
        assert math.isclose(record.total_ms, expected, rel_tol=1e-9)

    def test_batchwise_timing_bills_a_round_trip_per_update(self):
        profiles, costs, sizes = _world()
        plan = RoundPlan((0,), (1.0,), 4)
        batch_bits = 32 * 16 * 64
        record = execute_round(plan, profiles, sizes, costs, lambda: 0.0,
                               clock=SimClock(), ledger=TransferLedger(),
                               protocol="sfl", timing="batchwise", batch_bits=batch_bits)
        p = profiles[0]
        expected = 4 * (p.client_batch_ms + p.server_batch_ms + 2 * batch_bits / costs.bandwidth_bpms)
        assert math.isclose(record.total_ms, expected, rel_tol=1e-12)
        assert record.total_ms == batchwise_round_time(plan, profiles, batch_bits, costs)

    def test_ledger_bits_land_in_the_record(self):
        profiles, costs, sizes = _world()
        plan = RoundPlan((0,), (1.0,), 1)
        clock = SimClock()
        ledger = TransferLedger()

        def transition():
            ledger.record("x", clock.round_index, 0, UPLINK, 1000)
            ledger.record("x", clock.round_index, 0, DOWNLINK, 500)
            return 0.0

        record = execute_round(plan, profiles, sizes, costs, transition,
                               clock=clock, ledger=ledger, protocol="x")
        assert record.uplink_bits == 1000
        assert record.downlink_bits == 500

    def test_skipped_round_does_not_advance_time(self):
        clock = SimClock()
        record = skipped_record(0, "splitme", 5, comm_estimate_ms=12.0)
        clock.skip()
        assert record.skipped and record.total_ms == 0.0
        assert clock.elapsed_ms == 0.0 and clock.round_index == 1


class TestVolumeReport:
    def test_cumulative_volume_is_nondecreasing_and_tagged(self):
        ledger = TransferLedger()
        for t in range(3):
            ledger.record("splitme", t, 0, UPLINK, 8e6)
            ledger.record("splitme", t, 0, DOWNLINK, 8e6)
            ledger.record("sfl", t, 0, UPLINK, 4e6)
        report = volume_report(ledger)
        assert set(report) == {"splitme", "sfl"}
        cums = [row[2] for row in report["splitme"]]
        assert cums == sorted(cums)
        assert math.isclose(cums[-1], 3 * 2.0, rel_tol=1e-12)  # 2 MB per round
        assert math.isclose(report["sfl"][-1][2], 1.5, rel_tol=1e-12)
