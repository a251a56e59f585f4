"""Deterministic simulated environment: profiles, clock, round accounting.

Time never comes from the host clock. Every executed round advances the
simulated wall clock by the round's makespan, and all byte counts come from
the transfer ledger the protocol wrote into, so a run is bit-reproducible
from its configuration and seeds.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import sysopt
from .errors import InputError
from .protocol import DOWNLINK, UPLINK, TransferLedger
from .sysopt import CostParams, RoundPlan, UplinkSizes

SLICE_TAGS = ("eMBB", "uRLLC", "mMTC")

DEFAULT_CLIENT_BATCH_MS = (0.34, 0.46)
DEFAULT_SERVER_BATCH_MS = (1.2, 1.6)
DEFAULT_DEADLINE_MS = (50.0, 100.0)


@dataclass(frozen=True)
class ClientProfile:
    """Static per-client facts: per-batch compute times and slice deadline."""

    client_batch_ms: float  # per-batch time on the client side
    server_batch_ms: float  # per-batch time on the paired server app
    deadline_ms: float  # slice-specific round deadline
    slice_tag: str

    def __post_init__(self):
        if self.client_batch_ms <= 0 or self.server_batch_ms <= 0 or self.deadline_ms <= 0:
            raise InputError("profile times must be positive")


def sample_profiles(
    count: int,
    seed,
    client_batch_ms: tuple[float, float] = DEFAULT_CLIENT_BATCH_MS,
    server_batch_ms: tuple[float, float] = DEFAULT_SERVER_BATCH_MS,
    deadline_ms: tuple[float, float] = DEFAULT_DEADLINE_MS,
) -> tuple[ClientProfile, ...]:
    """Uniform draws per client; slice tags rotate through the three classes."""
    if count < 1:
        raise InputError("need at least one client")
    for lo, hi in (client_batch_ms, server_batch_ms, deadline_ms):
        if not 0 < lo <= hi:
            raise InputError("ranges must satisfy 0 < lo <= hi")
    rng = np.random.default_rng(seed)
    qc = rng.uniform(*client_batch_ms, size=count)
    qs = rng.uniform(*server_batch_ms, size=count)
    deadlines = rng.uniform(*deadline_ms, size=count)
    return tuple(
        ClientProfile(float(qc[m]), float(qs[m]), float(deadlines[m]), SLICE_TAGS[m % 3])
        for m in range(count)
    )


@dataclass
class SimClock:
    """Simulated wall clock; elapsed time only accrues on executed rounds."""

    round_index: int = 0
    elapsed_ms: float = 0.0

    def advance(self, total_ms: float) -> None:
        self.elapsed_ms += total_ms
        self.round_index += 1

    def skip(self) -> None:
        self.round_index += 1


@dataclass(frozen=True)
class RoundRecord:
    """Measured outcome of one round, reproducible from config + seed."""

    round_index: int
    protocol: str
    selected: tuple[int, ...]
    fractions: tuple[float, ...]
    local_updates: int
    total_ms: float
    comm_cost: float
    comp_cost: float
    uplink_bits: int
    downlink_bits: int
    loss: float | None
    test_accuracy: float | None
    skipped: bool
    comm_estimate_ms: float | None = None

    def __post_init__(self):
        for name in ("total_ms", "comm_cost", "comp_cost"):
            if not np.isfinite(getattr(self, name)):
                raise InputError(f"round record field {name} must be finite")


def skipped_record(
    round_index: int,
    protocol: str,
    local_updates: int,
    comm_estimate_ms: float | None = None,
) -> RoundRecord:
    """The record written when the deadline filter rejects every client."""
    return RoundRecord(
        round_index=round_index,
        protocol=protocol,
        selected=(),
        fractions=(),
        local_updates=local_updates,
        total_ms=0.0,
        comm_cost=0.0,
        comp_cost=0.0,
        uplink_bits=0,
        downlink_bits=0,
        loss=None,
        test_accuracy=None,
        skipped=True,
        comm_estimate_ms=comm_estimate_ms,
    )


def _effective_profiles(profiles: Sequence[ClientProfile]) -> tuple[ClientProfile, ...]:
    # Full-model training does all the work client-side; fold the server
    # share into the client per-batch time and zero the server phase.
    return tuple(
        ClientProfile(
            p.client_batch_ms + p.server_batch_ms, 1e-12, p.deadline_ms, p.slice_tag
        )
        for p in profiles
    )


def batchwise_round_time(
    plan: RoundPlan,
    profiles: Sequence[ClientProfile],
    batch_bits: float,
    costs: CostParams,
) -> float:
    """Per-update cycle time for vanilla split learning.

    Every local update serializes client compute, a batch uplink, server
    compute, and a gradient downlink of the same size.
    """
    if not plan.selected:
        return 0.0
    bpms = costs.bandwidth_bpms
    return plan.local_updates * max(
        profiles[m].client_batch_ms
        + profiles[m].server_batch_ms
        + 2.0 * batch_bits / (b * bpms)
        for m, b in zip(plan.selected, plan.fractions)
    )


def execute_round(
    plan: RoundPlan,
    profiles: Sequence[ClientProfile],
    sizes: UplinkSizes,
    costs: CostParams,
    transition: Callable[[], float],
    clock: SimClock,
    ledger: TransferLedger,
    protocol: str,
    timing: str = "split",
    batch_bits: float = 0.0,
    comm_estimate_ms: float | None = None,
) -> RoundRecord:
    """Run one protocol transition and account for its time, cost, and bytes.

    ``timing`` picks the latency model: ``split`` uses the makespan formula
    with distinct client/server phases, ``full`` folds all compute into the
    client phase (no model split), ``batchwise`` bills a round trip per
    local update. Downlink volume is counted but never contributes to time.
    """
    t = clock.round_index
    loss = transition()
    if timing == "split":
        total_ms, _ = sysopt.round_time(plan, profiles, sizes, costs)
    elif timing == "full":
        total_ms, _ = sysopt.round_time(plan, _effective_profiles(profiles), sizes, costs)
    elif timing == "batchwise":
        total_ms = batchwise_round_time(plan, profiles, batch_bits, costs)
    else:
        raise InputError(f"unknown timing model {timing!r}")
    record = RoundRecord(
        round_index=t,
        protocol=protocol,
        selected=plan.selected,
        fractions=plan.fractions,
        local_updates=plan.local_updates,
        total_ms=total_ms,
        comm_cost=sysopt.comm_cost(plan, costs),
        comp_cost=sysopt.comp_cost(plan, profiles, costs),
        uplink_bits=ledger.total_bits(protocol=protocol, round_index=t, direction=UPLINK),
        downlink_bits=ledger.total_bits(protocol=protocol, round_index=t, direction=DOWNLINK),
        loss=loss,
        test_accuracy=None,
        skipped=False,
        comm_estimate_ms=comm_estimate_ms,
    )
    clock.advance(total_ms)
    return record


def volume_report(ledger: TransferLedger) -> dict[str, list[tuple[int, float, float]]]:
    """Cumulative communicated megabytes per protocol.

    Returns, per protocol, a list of (round, round_mb, cumulative_mb) in
    round order. Megabytes are decimal (1 MB = 8e6 bits).
    """
    per_round: dict[str, dict[int, int]] = {}
    for ev in ledger.events():
        per_round.setdefault(ev.protocol, {}).setdefault(ev.round_index, 0)
        per_round[ev.protocol][ev.round_index] += ev.bits
    report: dict[str, list[tuple[int, float, float]]] = {}
    for proto, rounds in per_round.items():
        rows = []
        running = 0.0
        for rnd in sorted(rounds):
            mb = rounds[rnd] / 8e6
            running += mb
            rows.append((rnd, mb, running))
        report[proto] = rows
    return report
