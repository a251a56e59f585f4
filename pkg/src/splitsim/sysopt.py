"""Per-round cost/latency model and the two-stage system optimizer.

Round cost combines resource usage and learning time,

    cost = rho * (R_comm + R_compute) + (1 - rho) * T_round,

where R_comm sums allocated bandwidth times its unit price, R_compute sums
per-client compute time (local updates times per-batch cost on both sides)
times its unit price, and T_round is a makespan: the slowest client's
compute-plus-uplink, plus the slowest server-side phase. The optimizer runs
in two stages each round: a deadline filter picks every client whose
estimated round time fits its slice deadline, then bandwidth fractions and
the local-update count are chosen to minimize (rounds-to-accuracy x cost),
with the bandwidth subproblem solved exactly by bisection on the makespan.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Protocol, Sequence

import numpy as np

from .errors import InputError, PlanError

_SUM_TOL = 1e-9


class TrainerProfile(Protocol):
    """Attributes sysopt needs from a client profile (owned by simnet)."""

    client_batch_ms: float
    server_batch_ms: float
    deadline_ms: float


@dataclass(frozen=True)
class CostParams:
    """Prices, bandwidth budget, trade-off, and round-count constants."""

    bandwidth_bps: float = 1e9  # B
    bandwidth_unit_cost: float = 1.0  # p_c
    compute_unit_cost: float = 1.0  # p_tr
    tradeoff: float = 0.8  # rho
    min_fraction: float = 1.0 / 50.0  # b_min
    round_constant: float = 1.0  # kappa, hidden constant in rounds-to-accuracy
    target_accuracy: float = 0.1  # epsilon

    def __post_init__(self):
        if self.bandwidth_bps <= 0 or self.bandwidth_unit_cost < 0 or self.compute_unit_cost < 0:
            raise InputError("bandwidth and unit costs must be positive")
        if not 0.0 <= self.tradeoff <= 1.0:
            raise InputError("tradeoff must lie in [0, 1]")
        if not 0.0 < self.min_fraction <= 1.0:
            raise InputError("min_fraction must lie in (0, 1]")
        if self.round_constant <= 0 or self.target_accuracy <= 0:
            raise InputError("round_constant and target_accuracy must be positive")

    @property
    def bandwidth_bpms(self) -> float:
        return self.bandwidth_bps / 1e3


@dataclass(frozen=True)
class UplinkSizes:
    """Per-client uplink payload in bits (activation matrix plus model share)."""

    payload_bits: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "payload_bits", tuple(float(b) for b in self.payload_bits))
        if any(b < 0 for b in self.payload_bits):
            raise InputError("payloads must be nonnegative")


@dataclass(frozen=True)
class RoundPlan:
    """One round's decisions: who participates, bandwidth shares, local updates."""

    selected: tuple[int, ...]
    fractions: tuple[float, ...]
    local_updates: int

    def __post_init__(self):
        object.__setattr__(self, "selected", tuple(int(m) for m in self.selected))
        object.__setattr__(self, "fractions", tuple(float(b) for b in self.fractions))
        if self.local_updates < 1:
            raise PlanError("local update count must be at least 1")
        if len(self.selected) != len(self.fractions):
            raise PlanError("one bandwidth fraction per selected client is required")
        if len(set(self.selected)) != len(self.selected):
            raise PlanError("selected clients must be unique")
        if self.selected:
            if any(b <= 0 for b in self.fractions):
                raise PlanError("selected clients must receive positive bandwidth")
            total = math.fsum(self.fractions)
            if abs(total - 1.0) > _SUM_TOL:
                raise PlanError(f"bandwidth fractions sum to {total!r}, not 1")

    @classmethod
    def uniform(cls, selected: Sequence[int], local_updates: int) -> "RoundPlan":
        selected = tuple(selected)
        k = len(selected)
        return cls(selected, tuple(1.0 / k for _ in selected), local_updates)

    def fraction_of(self, client: int) -> float:
        try:
            return self.fractions[self.selected.index(client)]
        except ValueError:
            return 0.0


@dataclass(frozen=True)
class SelectorState:
    """Running estimate of the max communication time, plus the E in force."""

    comm_estimate_ms: float  # weighted running max uplink time
    last_local_updates: int
    smoothing: float = 0.7  # weight kept on the old estimate

    def __post_init__(self):
        if self.comm_estimate_ms <= 0:
            raise InputError("the communication-time estimate must be positive")
        if not 0.0 < self.smoothing < 1.0:
            raise InputError("smoothing must lie strictly in (0, 1)")
        if self.last_local_updates < 1:
            raise InputError("local update count must be at least 1")


def initial_comm_estimate(sizes: UplinkSizes, costs: CostParams) -> float:
    """Pessimistic start: every client selected, bandwidth split uniformly.

    Equals ``max_m M * payload_m / B`` in milliseconds.
    """
    m = len(sizes.payload_bits)
    if m == 0:
        raise InputError("need at least one client payload")
    return max(m * bits / costs.bandwidth_bpms for bits in sizes.payload_bits)


def comm_cost(plan: RoundPlan, costs: CostParams) -> float:
    """Bandwidth usage cost: sum of allocated bandwidth times its unit price."""
    return math.fsum(plan.fractions) * costs.bandwidth_bps * costs.bandwidth_unit_cost


def comp_cost(plan: RoundPlan, profiles: Sequence[TrainerProfile], costs: CostParams) -> float:
    """Compute usage cost over both sides: E * (q_c + q_s) * p_tr, summed."""
    return costs.compute_unit_cost * plan.local_updates * math.fsum(
        profiles[m].client_batch_ms + profiles[m].server_batch_ms for m in plan.selected
    )


def uplink_time(client: int, fraction: float, sizes: UplinkSizes, costs: CostParams) -> float:
    """Milliseconds to push one client's payload through its bandwidth share."""
    if fraction <= 0:
        raise PlanError(f"client {client} is selected but holds no bandwidth")
    return sizes.payload_bits[client] / (fraction * costs.bandwidth_bpms)


@dataclass(frozen=True)
class PhaseBreakdown:
    client: int
    compute_ms: float
    uplink_ms: float
    server_ms: float


def round_time(
    plan: RoundPlan,
    profiles: Sequence[TrainerProfile],
    sizes: UplinkSizes,
    costs: CostParams,
) -> tuple[float, tuple[PhaseBreakdown, ...]]:
    """Makespan over the selected set: max(compute + uplink) + max(server)."""
    if not plan.selected:
        return 0.0, ()
    phases = []
    for m, b in zip(plan.selected, plan.fractions):
        phases.append(
            PhaseBreakdown(
                client=m,
                compute_ms=plan.local_updates * profiles[m].client_batch_ms,
                uplink_ms=uplink_time(m, b, sizes, costs),
                server_ms=plan.local_updates * profiles[m].server_batch_ms,
            )
        )
    total = max(p.compute_ms + p.uplink_ms for p in phases) + max(p.server_ms for p in phases)
    return total, tuple(phases)


def total_cost(
    plan: RoundPlan,
    profiles: Sequence[TrainerProfile],
    sizes: UplinkSizes,
    costs: CostParams,
) -> float:
    resource = comm_cost(plan, costs) + comp_cost(plan, profiles, costs)
    return costs.tradeoff * resource + (1.0 - costs.tradeoff) * round_time(plan, profiles, sizes, costs)[0]


def k_epsilon(local_updates: int, costs: CostParams) -> int:
    """Rounds needed for target accuracy: ceil(kappa (E+1)^2 / (E^2 eps^2))."""
    if local_updates < 1:
        raise InputError("local update count must be at least 1")
    e = float(local_updates)
    return math.ceil(
        costs.round_constant * (e + 1.0) ** 2 / (e * e * costs.target_accuracy**2)
    )


def round_objective(
    plan: RoundPlan,
    profiles: Sequence[TrainerProfile],
    sizes: UplinkSizes,
    costs: CostParams,
) -> float:
    """Rounds-to-accuracy times per-round cost; what the allocator minimizes."""
    return k_epsilon(plan.local_updates, costs) * total_cost(plan, profiles, sizes, costs)


def select_trainers(
    profiles: Sequence[TrainerProfile],
    selector: SelectorState,
    local_updates: int,
) -> tuple[int, ...]:
    """Deadline filter: keep every client whose estimated round time fits.

    A client is feasible when E (q_c + q_s) plus the running communication
    estimate stays within its slice deadline. The filter returns the maximal
    feasible set; an empty result means the round must be skipped.
    """
    if not profiles:
        raise InputError("need at least one profile")
    chosen = []
    for m, prof in enumerate(profiles):
        estimate = local_updates * (prof.client_batch_ms + prof.server_batch_ms)
        if estimate + selector.comm_estimate_ms <= prof.deadline_ms:
            chosen.append(m)
    return tuple(chosen)


def update_comm_estimate(selector: SelectorState, realized_max_ms: float) -> SelectorState:
    """Fold the realized max uplink time into the running estimate."""
    if realized_max_ms < 0:
        raise InputError("realized time must be nonnegative")
    new = selector.smoothing * selector.comm_estimate_ms + (1.0 - selector.smoothing) * realized_max_ms
    return replace(selector, comm_estimate_ms=new)


def _needed_fractions(
    tau: float,
    compute_ms: np.ndarray,
    payload_bits: np.ndarray,
    b_min: float,
    bpms: float,
) -> np.ndarray | None:
    """Smallest per-client fractions finishing compute+uplink by ``tau``."""
    slack = tau - compute_ms
    if (slack <= 0).any():
        return None
    return np.maximum(b_min, payload_bits / (bpms * slack))


def optimal_fractions(
    selected: Sequence[int],
    profiles: Sequence[TrainerProfile],
    sizes: UplinkSizes,
    costs: CostParams,
    local_updates: int,
    rel_tol: float = 1e-9,
) -> tuple[float, ...]:
    """Bandwidth minimizing the makespan term for a fixed E.

    Bisects on the makespan value tau: a tau is feasible when the minimal
    fractions meeting it (each at least b_min) sum to at most 1. The minimal
    feasible fractions are then scaled up proportionally to use the whole
    budget.
    """
    selected = tuple(selected)
    if not selected:
        raise PlanError("cannot allocate bandwidth for an empty selection")
    b_min = costs.min_fraction
    if len(selected) * b_min > 1.0 + 1e-12:
        raise PlanError(
            f"{len(selected)} clients at minimum fraction {b_min} exceed the budget"
        )
    compute = np.array([local_updates * profiles[m].client_batch_ms for m in selected])
    payload = np.array([sizes.payload_bits[m] for m in selected])
    bpms = costs.bandwidth_bpms

    lo = float(compute.max())
    hi = float((compute + payload / (b_min * bpms)).max())
    if hi <= lo:
        hi = lo + max(lo, 1.0) * 1e-6  # all payloads zero: any tau above compute works
    for _ in range(200):
        if (hi - lo) <= rel_tol * hi:
            break
        mid = 0.5 * (lo + hi)
        need = _needed_fractions(mid, compute, payload, b_min, bpms)
        if need is not None and need.sum() <= 1.0:
            hi = mid
        else:
            lo = mid
    fractions = _needed_fractions(hi, compute, payload, b_min, bpms)
    if fractions is None:
        raise PlanError("bisection failed to find a feasible makespan")
    fractions = fractions / fractions.sum()
    return tuple(float(b) for b in fractions)


def allocate(
    selected: Sequence[int],
    profiles: Sequence[TrainerProfile],
    sizes: UplinkSizes,
    costs: CostParams,
    last_local_updates: int,
) -> RoundPlan:
    """Jointly pick bandwidth and the local-update count for this round.

    Enumerates E in {1..E_last} (the cap keeps E non-increasing across
    rounds), solves the bandwidth subproblem exactly for each candidate, and
    returns the plan minimizing rounds-to-accuracy times per-round cost.
    Ties break toward the smaller E.
    """
    if not selected:
        raise PlanError("cannot allocate resources for an empty selection")
    if last_local_updates < 1:
        raise PlanError("the local-update cap must be at least 1")
    best: RoundPlan | None = None
    best_obj = math.inf
    for e in range(1, last_local_updates + 1):
        plan = RoundPlan(tuple(selected), optimal_fractions(selected, profiles, sizes, costs, e), e)
        obj = round_objective(plan, profiles, sizes, costs)
        if obj < best_obj:
            best, best_obj = plan, obj
    assert best is not None
    return best


def lr_condition(eta: float, gradient_diversity: float, local_updates: int, smoothness: float) -> bool:
    """Sign test for the local learning rate used by the convergence analysis.

    True when ``-eta/2 + 8 lam E^2 L^2 eta^3 + 2 lam eta^2 L <= 0``.
    """
    if eta <= 0 or gradient_diversity <= 0 or local_updates < 1 or smoothness <= 0:
        raise InputError("all learning-rate condition inputs must be positive")
    e, lam, l = float(local_updates), gradient_diversity, smoothness
    return (-eta / 2.0 + 8.0 * lam * e * e * l * l * eta**3 + 2.0 * lam * eta * eta * l) <= 0.0


def theory_lr(
    rounds: int,
    local_updates: int,
    smoothness: float,
    weights: Sequence[float],
    diversity_bound,
) -> float:
    """Closed-form learning rate giving an O(1/sqrt(T)) rate.

    ``1 / (sqrt(T E) (2 L sum q_m b_m + L sum q_m b_m^2))`` where b is the
    per-client lower bound on the label-distribution distance (a scalar
    broadcasts). With a smaller bound for the bottom model than the top one,
    the bottom model's rate comes out larger.
    """
    if rounds < 1 or local_updates < 1 or smoothness <= 0:
        raise InputError("rounds, local updates, and smoothness must be positive")
    q = np.asarray(weights, dtype=np.float64)
    if (q < 0).any() or abs(q.sum() - 1.0) > 1e-9:
        raise InputError("selection weights must be nonnegative and sum to 1")
    b = np.broadcast_to(np.asarray(diversity_bound, dtype=np.float64), q.shape)
    if (b <= 0).any():
        raise InputError("diversity bounds must be positive")
    s1 = float(np.sum(q * b))
    s2 = float(np.sum(q * b * b))
    return 1.0 / (math.sqrt(rounds * local_updates) * (2.0 * smoothness * s1 + smoothness * s2))
