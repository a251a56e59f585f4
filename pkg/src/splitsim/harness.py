"""Experiment runner: config parsing, the round loop, and metric files.

A run consumes a JSON config (strictly validated; unknown keys rejected),
executes the chosen protocol for a round budget or until a target accuracy,
and writes four artifacts into the output directory:

* ``rounds.csv``: one row per round, fixed versioned column set
* ``summary.json``: totals derivable from the CSV
* ``resolved_config.json``: every field materialized; re-running from this
  file reproduces the outputs byte for byte
* ``model.bin``: the final deployable model (joined, for the mutual
  protocol) in the parameter-file format
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data, nn_core, protocol, simnet, split_models, sysopt
from .errors import ComparisonError, DivergedError, SchemaError
from .nn_core import DenseNet, GradClipBound
from .protocol import TrainingParams, TransferLedger
from .simnet import RoundRecord, SimClock
from .split_models import ArchitectureSpec, SplitSizes
from .sysopt import CostParams, RoundPlan, SelectorState, UplinkSizes

PROTOCOLS = ("splitme", "fedavg", "sfl", "oranfed")
CSV_SCHEMA = "roundlog-v1"
CSV_COLUMNS = (
    "round",
    "protocol",
    "K",
    "E",
    "T_total_ms",
    "Rco",
    "Rcp",
    "uplink_bits",
    "downlink_bits",
    "loss",
    "test_acc",
    "skipped",
)

# Fields whose defaults are our choices rather than values from the
# experimental settings table; stamped into every resolved config.
NON_PAPER_DEFAULTS = (
    "layer_widths",
    "lr_client",
    "lr_server",
    "lr_full",
    "batch_size",
    "clip_bound",
    "inversion_gamma",
    "inversion_ms_per_layer",
    "round_constant",
    "epsilon",
    "rounds",
    "eval_interval",
    "synthetic_samples",
    "synthetic_features",
    "synthetic_classes",
    "synthetic_separation",
    "test_fraction",
    "partition_mode",
    "oranfed_local_updates",
)


@dataclass(frozen=True)
class ExperimentConfig:
    # protocol under test
    protocol: str = "splitme"
    # population and link (experimental-table defaults)
    clients: int = 50
    bandwidth_bps: float = 1e9
    client_batch_ms: tuple[float, float] = simnet.DEFAULT_CLIENT_BATCH_MS
    server_batch_ms: tuple[float, float] = simnet.DEFAULT_SERVER_BATCH_MS
    deadline_ms: tuple[float, float] = simnet.DEFAULT_DEADLINE_MS
    bandwidth_unit_cost: float = 1.0
    compute_unit_cost: float = 1.0
    min_bandwidth_fraction: float | None = None  # defaults to 1/clients
    tradeoff: float = 0.8
    selection_smoothing: float = 0.7
    # model: ten layers, two of them on the client
    layer_widths: tuple[int, ...] = (16, 32, 32, 32, 32, 32, 32, 32, 32, 32, 3)
    cut_index: int = 2
    # training
    initial_local_updates: int = 20
    lr_client: float = 0.01
    lr_server: float = 0.005
    lr_full: float = 0.05
    batch_size: int = 32
    clip_bound: float = 100.0
    inversion_gamma: float = 1e-3
    inversion_ms_per_layer: float = 0.0
    fedavg_clients: int = 10
    fedavg_local_updates: int = 10
    sfl_clients: int = 20
    sfl_local_updates: int = 14
    oranfed_local_updates: int = 10
    # stopping
    rounds: int = 150
    target_accuracy: float | None = None
    eval_interval: int = 5
    # rounds-to-accuracy model
    round_constant: float = 1.0
    epsilon: float = 0.1
    # dataset
    dataset: str = "synthetic"  # or a CSV path
    label_column: str = "label"
    synthetic_samples: int = 3000
    synthetic_features: int = 16
    synthetic_classes: int = 3
    synthetic_separation: float = 6.0
    test_fraction: float = 0.2
    partition_mode: str = "one-class"
    dataset_seed: int = 0
    # reproducibility
    seed: int = 0
    init_model: str | None = None

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise SchemaError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if self.clients < 1:
            raise SchemaError("clients must be at least 1")
        if self.rounds < 0:
            raise SchemaError("rounds must be nonnegative")
        if self.seed < 0 or self.dataset_seed < 0:
            raise SchemaError("seeds must be nonnegative")
        if self.eval_interval < 1:
            raise SchemaError("eval_interval must be at least 1")
        if self.initial_local_updates < 1:
            raise SchemaError("initial_local_updates must be at least 1")
        bmin = self.resolved_min_fraction
        if not 0 < bmin <= 1.0 / self.clients + 1e-12:
            raise SchemaError("min_bandwidth_fraction must lie in (0, 1/clients]")
        try:
            ArchitectureSpec(self.layer_widths, self.cut_index)
        except Exception as exc:
            raise SchemaError(f"bad architecture: {exc}") from exc
        if self.protocol == "fedavg" and not 1 <= self.fedavg_clients <= self.clients:
            raise SchemaError("fedavg_clients must lie in [1, clients]")
        if self.protocol == "sfl" and not 1 <= self.sfl_clients <= self.clients:
            raise SchemaError("sfl_clients must lie in [1, clients]")
        if self.target_accuracy is not None and not 0 < self.target_accuracy <= 1:
            raise SchemaError("target_accuracy must lie in (0, 1]")

    @property
    def resolved_min_fraction(self) -> float:
        if self.min_bandwidth_fraction is None:
            return 1.0 / self.clients
        return self.min_bandwidth_fraction

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise SchemaError("config must be a JSON object")
        if "config" in raw:  # resolved-config wrapper
            raw = raw["config"]
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - set(known))
        if unknown:
            raise SchemaError(f"unknown config keys: {', '.join(unknown)}")
        coerced = {}
        for key, value in raw.items():
            if key in ("layer_widths", "client_batch_ms", "server_batch_ms", "deadline_ms"):
                if not isinstance(value, (list, tuple)):
                    raise SchemaError(f"{key} must be a list")
                coerced[key] = tuple(value)
            else:
                coerced[key] = value
        try:
            return cls(**coerced)
        except TypeError as exc:
            raise SchemaError(str(exc)) from exc

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path} is not valid JSON: {exc}") from exc
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for key in ("layer_widths", "client_batch_ms", "server_batch_ms", "deadline_ms"):
            out[key] = list(out[key])
        return out

    def with_overrides(self, **kwargs) -> "ExperimentConfig":
        return dataclasses.replace(self, **kwargs)


@dataclass(frozen=True)
class RunReport:
    config: ExperimentConfig
    records: tuple[RoundRecord, ...]
    summary: dict
    out_dir: Path


def _cost_params(config: ExperimentConfig) -> CostParams:
    return CostParams(
        bandwidth_bps=config.bandwidth_bps,
        bandwidth_unit_cost=config.bandwidth_unit_cost,
        compute_unit_cost=config.compute_unit_cost,
        tradeoff=config.tradeoff,
        min_fraction=config.resolved_min_fraction,
        round_constant=config.round_constant,
        target_accuracy=config.epsilon,
    )


def _training_params(config: ExperimentConfig) -> TrainingParams:
    return TrainingParams(
        lr_client=config.lr_client,
        lr_server=config.lr_server,
        lr_full=config.lr_full,
        batch_size=config.batch_size,
        clip=GradClipBound(config.clip_bound),
    )


def _prepare_data(config: ExperimentConfig):
    if config.dataset == "synthetic":
        train, test = data.gen_synthetic(
            samples=config.synthetic_samples,
            feature_dim=config.synthetic_features,
            classes=config.synthetic_classes,
            separation=config.synthetic_separation,
            seed=config.dataset_seed,
            test_fraction=config.test_fraction,
        )
    else:
        full = data.load_csv(config.dataset, config.label_column)
        train, test = data.train_test_split(full, config.test_fraction, config.dataset_seed)
    spec = data.PartitionSpec(config.clients, config.partition_mode, config.dataset_seed)
    parts = data.partition(train, spec)
    return train, test, parts


def accuracy(net: DenseNet, ds: data.LabeledDataset) -> float:
    pred = nn_core.forward(net, ds.features).argmax(axis=1)
    return float(np.mean(pred == ds.label_indices()))


class _Runner:
    """One experiment: owns the state, clock, ledger, and the round loop."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.costs = _cost_params(config)
        self.params = _training_params(config)
        self.arch = ArchitectureSpec(config.layer_widths, config.cut_index)
        self.train, self.test, self.parts = _prepare_data(config)
        if self.train.feature_dim != self.arch.input_dim:
            raise SchemaError(
                f"layer_widths starts at {self.arch.input_dim} but the dataset "
                f"has {self.train.feature_dim} features"
            )
        if self.train.n_classes != self.arch.n_classes:
            raise SchemaError(
                f"layer_widths ends at {self.arch.n_classes} but the dataset "
                f"has {self.train.n_classes} classes"
            )
        self.profiles = simnet.sample_profiles(
            config.clients,
            (config.dataset_seed, 2),
            client_batch_ms=config.client_batch_ms,
            server_batch_ms=config.server_batch_ms,
            deadline_ms=config.deadline_ms,
        )
        self.ledger = TransferLedger()
        self.clock = SimClock()
        self._init_state()

    # -- state / payload construction -------------------------------------

    def _init_state(self) -> None:
        cfg = self.config
        if cfg.protocol == "splitme":
            client, inverse, sizes = split_models.split(self.arch, cfg.seed)
            if cfg.init_model is not None:
                client = split_models.load_params(cfg.init_model)
            self.sizes: SplitSizes = sizes
            self.state = protocol.FederationState(client, inverse, 0, cfg.seed)
            payloads = [
                sizes.activation_bits(part.n) + split_models.payload_bits(client)
                for part in self.parts
            ]
            self.uplink_sizes = UplinkSizes(tuple(payloads))
            self.selector: SelectorState | None = SelectorState(
                comm_estimate_ms=sysopt.initial_comm_estimate(self.uplink_sizes, self.costs),
                last_local_updates=cfg.initial_local_updates,
                smoothing=cfg.selection_smoothing,
            )
            return
        full = split_models.build_full(self.arch, cfg.seed)
        if cfg.init_model is not None:
            full = split_models.load_params(cfg.init_model)
        model_bits = split_models.payload_bits(full)
        self.uplink_sizes = UplinkSizes(tuple(float(model_bits) for _ in self.parts))
        _, _, self.sizes = split_models.split(self.arch, cfg.seed)
        if cfg.protocol == "sfl":
            bottom, top = split_models.split_full(full, cfg.cut_index)
            self.state = protocol.SplitPairState(bottom, top, 0, cfg.seed)
            self.selector = None
        elif cfg.protocol == "fedavg":
            self.state = protocol.FullModelState(full, 0, cfg.seed)
            self.selector = None
        else:  # oranfed
            self.state = protocol.FullModelState(full, 0, cfg.seed)
            self.selector = SelectorState(
                comm_estimate_ms=sysopt.initial_comm_estimate(self.uplink_sizes, self.costs),
                last_local_updates=cfg.oranfed_local_updates,
                smoothing=cfg.selection_smoothing,
            )

    # -- per-protocol plumbing --------------------------------------------

    def _make_plan(self) -> tuple[RoundPlan | None, float | None]:
        cfg = self.config
        if cfg.protocol in ("splitme", "oranfed"):
            assert self.selector is not None
            estimate = self.selector.comm_estimate_ms
            chosen = sysopt.select_trainers(
                self.profiles, self.selector, self.selector.last_local_updates
            )
            if not chosen:
                return None, estimate
            if cfg.protocol == "splitme":
                plan = sysopt.allocate(
                    chosen,
                    self.profiles,
                    self.uplink_sizes,
                    self.costs,
                    self.selector.last_local_updates,
                )
            else:
                fractions = sysopt.optimal_fractions(
                    chosen, self.profiles, self.uplink_sizes, self.costs, cfg.oranfed_local_updates
                )
                plan = RoundPlan(chosen, fractions, cfg.oranfed_local_updates)
            return plan, estimate
        if cfg.protocol == "fedavg":
            chosen = protocol.random_selection(
                cfg.seed, self.state.round_index, cfg.clients, cfg.fedavg_clients
            )
            return RoundPlan.uniform(chosen, cfg.fedavg_local_updates), None
        chosen = protocol.random_selection(
            cfg.seed, self.state.round_index, cfg.clients, cfg.sfl_clients
        )
        return RoundPlan.uniform(chosen, cfg.sfl_local_updates), None

    def _transition(self, plan: RoundPlan):
        cfg = self.config

        def step() -> float:
            if cfg.protocol == "splitme":
                self.state, loss = protocol.splitme_round(
                    self.state, plan, self.parts, self.params, self.ledger, self.sizes
                )
            elif cfg.protocol == "fedavg":
                self.state, loss = protocol.fedavg_round(
                    self.state,
                    len(plan.selected),
                    plan.local_updates,
                    self.parts,
                    self.params,
                    self.ledger,
                    selected=plan.selected,
                )
            elif cfg.protocol == "oranfed":
                self.state, loss = protocol.oranfed_round(
                    self.state, plan, self.parts, self.params, self.ledger
                )
            else:
                self.state, loss = protocol.vanilla_sfl_round(
                    self.state,
                    len(plan.selected),
                    plan.local_updates,
                    self.parts,
                    self.params,
                    self.ledger,
                    selected=plan.selected,
                )
            return loss

        return step

    def _timing(self) -> str:
        return {"splitme": "split", "fedavg": "full", "oranfed": "full", "sfl": "batchwise"}[
            self.config.protocol
        ]

    def deployable_model(self) -> DenseNet:
        """The model one would ship: joined for splitme, the net otherwise."""
        cfg = self.config
        if cfg.protocol == "splitme":
            participants = [
                (part.labels, nn_core.forward(self.state.client_net, part.features))
                for part in self.parts
            ]
            recovered = protocol.invert_server_model(
                self.state.inverse_server_net,
                participants,
                cfg.inversion_gamma,
                self.arch.server_widths,
            )
            return split_models.join(self.state.client_net, recovered)
        if cfg.protocol == "sfl":
            return split_models.join(self.state.client_net, self.state.server_net)
        return self.state.net

    def evaluate(self) -> float:
        return accuracy(self.deployable_model(), self.test)

    # -- the loop ----------------------------------------------------------

    def run_rounds(self) -> tuple[list[RoundRecord], int | None, float | None]:
        cfg = self.config
        records: list[RoundRecord] = []
        rounds_to_target: int | None = None
        last_accuracy: float | None = None
        batch_bits = float(cfg.batch_size * self.arch.cut_width * 64)
        for t in range(cfg.rounds):
            plan, estimate = self._make_plan()
            if plan is None:
                # infeasible-deadline event: nobody fits, the estimate stays
                assert self.selector is not None
                records.append(
                    simnet.skipped_record(
                        t, cfg.protocol, self.selector.last_local_updates, estimate
                    )
                )
                self.clock.skip()
                continue
            record = simnet.execute_round(
                plan,
                self.profiles,
                self.uplink_sizes,
                self.costs,
                self._transition(plan),
                clock=self.clock,
                ledger=self.ledger,
                protocol=cfg.protocol,
                timing=self._timing(),
                batch_bits=batch_bits,
                comm_estimate_ms=estimate,
            )
            if self.selector is not None:
                realized = max(
                    sysopt.uplink_time(m, b, self.uplink_sizes, self.costs)
                    for m, b in zip(plan.selected, plan.fractions)
                )
                self.selector = sysopt.update_comm_estimate(self.selector, realized)
                if cfg.protocol == "splitme":
                    self.selector = dataclasses.replace(
                        self.selector, last_local_updates=plan.local_updates
                    )
            due = (t + 1) % cfg.eval_interval == 0 or t == cfg.rounds - 1
            if due:
                last_accuracy = self.evaluate()
                record = dataclasses.replace(record, test_accuracy=last_accuracy)
            records.append(record)
            if (
                cfg.target_accuracy is not None
                and last_accuracy is not None
                and due
                and last_accuracy >= cfg.target_accuracy
            ):
                rounds_to_target = t + 1
                break
        return records, rounds_to_target, last_accuracy


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_rounds_csv(records: Sequence[RoundRecord], path: Path) -> None:
    lines = [f"# schema: {CSV_SCHEMA}", ",".join(CSV_COLUMNS)]
    for r in records:
        lines.append(
            ",".join(
                _format_cell(v)
                for v in (
                    r.round_index,
                    r.protocol,
                    len(r.selected),
                    r.local_updates,
                    r.total_ms,
                    r.comm_cost,
                    r.comp_cost,
                    r.uplink_bits,
                    r.downlink_bits,
                    r.loss,
                    r.test_accuracy,
                    r.skipped,
                )
            )
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def _summarize(
    config: ExperimentConfig,
    records: Sequence[RoundRecord],
    rounds_to_target: int | None,
    final_accuracy: float | None,
    diverged_at: int | None = None,
) -> dict:
    executed = [r for r in records if not r.skipped]
    selected_counts = [len(r.selected) for r in executed]
    total_up = sum(r.uplink_bits for r in records)
    total_down = sum(r.downlink_bits for r in records)
    # the one-shot model recovery is charged once, outside the round clock
    if config.protocol == "splitme":
        recovered_layers = len(config.layer_widths) - 1 - config.cut_index
        inversion_ms = recovered_layers * config.inversion_ms_per_layer
    else:
        inversion_ms = 0.0
    summary = {
        "schema": "summary-v1",
        "protocol": config.protocol,
        "seed": config.seed,
        "dataset_seed": config.dataset_seed,
        "rounds_configured": config.rounds,
        "rounds_executed": len(executed),
        "rounds_skipped": len(records) - len(executed),
        "rounds_to_target": rounds_to_target,
        "final_accuracy": final_accuracy,
        "total_time_ms": sum(r.total_ms for r in records),
        "inversion_time_ms": inversion_ms,
        "total_comm_cost": sum(r.comm_cost for r in records),
        "total_comp_cost": sum(r.comp_cost for r in records),
        "total_uplink_bits": total_up,
        "total_downlink_bits": total_down,
        "total_volume_mb": (total_up + total_down) / 8e6,
        "mean_selected": (sum(selected_counts) / len(selected_counts)) if selected_counts else 0.0,
        "final_local_updates": executed[-1].local_updates if executed else None,
        "diverged_at_round": diverged_at,
    }
    return summary


def _write_outputs(
    out_dir: Path,
    config: ExperimentConfig,
    records: Sequence[RoundRecord],
    summary: dict,
    model: DenseNet | None,
) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_rounds_csv(records, out_dir / "rounds.csv")
    resolved = {
        "schema": "splitsim-config-v1",
        "config": config.to_dict(),
        "non_paper_defaults": list(NON_PAPER_DEFAULTS),
    }
    (out_dir / "resolved_config.json").write_text(
        json.dumps(resolved, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    (out_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    if model is not None:
        split_models.save_params(model, out_dir / "model.bin")


def run(config: ExperimentConfig, out_dir) -> RunReport:
    """Execute one experiment and write its artifacts.

    On divergence the partial CSV, summary (with the failing round), and
    resolved config are still written before the error propagates.
    """
    out_dir = Path(out_dir)
    runner = _Runner(config)
    try:
        records, rounds_to_target, final_accuracy = runner.run_rounds()
    except DivergedError as exc:
        summary = _summarize(config, [], None, None, diverged_at=exc.round_index)
        _write_outputs(out_dir, config, [], summary, None)
        raise
    if config.rounds == 0:
        final_accuracy = None
    summary = _summarize(config, records, rounds_to_target, final_accuracy)
    _write_outputs(out_dir, config, records, summary, runner.deployable_model())
    return RunReport(config, tuple(records), summary, out_dir)


COMPARISON_COLUMNS = (
    "protocol",
    "rounds_executed",
    "rounds_to_target",
    "mean_selected",
    "total_volume_mb",
    "total_time_s",
    "total_comm_cost",
    "total_comp_cost",
    "events_per_client_round",
    "final_accuracy",
)


def _events_per_client_round(run_dir: Path, summary: dict) -> float | None:
    # reproducible from the CSV alone: 2 boundary events per client-round
    # for one-shot protocols, 2E for the batchwise one
    proto = summary["protocol"]
    if proto in ("splitme", "fedavg", "oranfed"):
        return 2.0
    resolved = json.loads((run_dir / "resolved_config.json").read_text(encoding="utf-8"))
    return 2.0 * resolved["config"]["sfl_local_updates"]


def compare(run_dirs: Sequence, out_path) -> Path:
    """Tabulate finished runs side by side; they must share a dataset seed."""
    run_dirs = [Path(d) for d in run_dirs]
    if len(run_dirs) < 2:
        raise ComparisonError("need at least two runs to compare")
    summaries = []
    for d in run_dirs:
        try:
            summaries.append(json.loads((d / "summary.json").read_text(encoding="utf-8")))
        except FileNotFoundError as exc:
            raise ComparisonError(f"{d} does not contain a finished run") from exc
    seeds = {s["dataset_seed"] for s in summaries}
    if len(seeds) != 1:
        raise ComparisonError(f"runs use different dataset seeds: {sorted(seeds)}")
    lines = [",".join(COMPARISON_COLUMNS)]
    for d, s in zip(run_dirs, summaries):
        row = (
            s["protocol"],
            s["rounds_executed"],
            s["rounds_to_target"],
            s["mean_selected"],
            s["total_volume_mb"],
            (s["total_time_ms"] + s.get("inversion_time_ms", 0.0)) / 1e3,
            s["total_comm_cost"],
            s["total_comp_cost"],
            _events_per_client_round(d, s),
            s["final_accuracy"],
        )
        lines.append(",".join(_format_cell(v) for v in row))
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    return out_path
