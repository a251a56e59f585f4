"""Round transitions for the four training protocols under comparison.

* ``splitme``: mutual split training. Each selected client downloads the
  shared bottom model plus the label embeddings produced by the server's
  inverse top model, runs E clipped-SGD steps pulling its bottom-model
  outputs toward those embeddings, then uploads its bottom model together
  with the cut-layer activations of its whole local dataset. The server
  runs E steps per client pulling the inverse model's label embeddings
  toward the uploaded activations, and both model families are averaged.
  The forward top model is recovered afterwards with
  :func:`invert_server_model`, one ridge solve per layer.
* ``fedavg``: full-model local SGD plus averaging.
* ``sfl``: vanilla split learning, with an activation batch up and a
  gradient batch down on every local update.
* ``oranfed``: fedavg driven by an externally supplied selection and
  bandwidth plan.

Transitions are pure functions from (state, plan, data) to a new state; the
only side effect is appending transfer events to the ledger they are given.
Per-client work is keyed by (seed, round, client) so results do not depend
on iteration order.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import nn_core
from .data import LabeledDataset
from .errors import ConfigurationError, DivergedError, InputError, ProtocolError
from .nn_core import Batch, DenseNet, GradClipBound, Layer
from .split_models import SplitSizes, payload_bits
from .sysopt import RoundPlan

UPLINK = "uplink"
DOWNLINK = "downlink"

# rng stream tags so client/server/selection draws never collide
_CLIENT_STREAM = 1
_SERVER_STREAM = 2
_SELECT_STREAM = 101


@dataclass(frozen=True)
class TransferEvent:
    protocol: str
    round_index: int
    client: int
    direction: str
    bits: int


class TransferLedger:
    """Append-only log of boundary crossings, one entry per transfer event."""

    def __init__(self):
        self._events: list[TransferEvent] = []

    def record(self, protocol: str, round_index: int, client: int, direction: str, bits) -> None:
        if direction not in (UPLINK, DOWNLINK):
            raise ProtocolError(f"unknown transfer direction {direction!r}")
        self._events.append(TransferEvent(protocol, round_index, client, direction, int(bits)))

    def events(self, protocol=None, round_index=None, client=None, direction=None) -> list[TransferEvent]:
        out = []
        for ev in self._events:
            if protocol is not None and ev.protocol != protocol:
                continue
            if round_index is not None and ev.round_index != round_index:
                continue
            if client is not None and ev.client != client:
                continue
            if direction is not None and ev.direction != direction:
                continue
            out.append(ev)
        return out

    def event_count(self, **filters) -> int:
        return len(self.events(**filters))

    def total_bits(self, **filters) -> int:
        return sum(ev.bits for ev in self.events(**filters))


@dataclass(frozen=True)
class TrainingParams:
    """Learning rates, batch size, and the shared gradient clip bound."""

    lr_client: float = 0.01
    lr_server: float = 0.005
    lr_full: float = 0.05
    batch_size: int = 32
    clip: GradClipBound = GradClipBound(100.0)

    def __post_init__(self):
        if self.lr_client < 0 or self.lr_server < 0 or self.lr_full < 0:
            raise InputError("learning rates must be nonnegative")
        if self.batch_size < 1:
            raise InputError("batch size must be at least 1")


@dataclass(frozen=True)
class FederationState:
    """Mutual split training state: bottom model plus inverse top model."""

    client_net: DenseNet
    inverse_server_net: DenseNet
    round_index: int
    seed: int


@dataclass(frozen=True)
class FullModelState:
    net: DenseNet
    round_index: int
    seed: int


@dataclass(frozen=True)
class SplitPairState:
    """Vanilla split learning state: bottom and top halves of one model."""

    client_net: DenseNet
    server_net: DenseNet
    round_index: int
    seed: int


@dataclass(frozen=True)
class UplinkPayload:
    """What one client sends up per round: full-dataset activations + model."""

    activations: np.ndarray
    client_net: DenseNet


class MinibatchSampler:
    """Without-replacement minibatches, reshuffling when the pool runs dry.

    A batch size of at least n always yields the whole set in index order,
    which keeps full-batch runs bit-reproducible across clients.
    """

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self._n = n
        self._batch = min(batch_size, n)
        self._full = batch_size >= n
        self._rng = rng
        self._perm: np.ndarray | None = None
        self._pos = n

    def next_indices(self) -> np.ndarray:
        if self._full:
            return np.arange(self._n)
        if self._perm is None or self._pos + self._batch > self._n:
            self._perm = self._rng.permutation(self._n)
            self._pos = 0
        out = self._perm[self._pos : self._pos + self._batch]
        self._pos += self._batch
        return out


def random_selection(seed: int, round_index: int, population: int, k: int) -> tuple[int, ...]:
    """The round's random participant draw, stable across call sites."""
    if not 1 <= k <= population:
        raise ProtocolError(f"cannot select {k} of {population} clients")
    rng = np.random.default_rng((seed, round_index, _SELECT_STREAM))
    return tuple(sorted(rng.choice(population, size=k, replace=False).tolist()))


def average_nets(nets: Sequence[DenseNet]) -> DenseNet:
    """Arithmetic mean of identically-shaped nets.

    Averages deviations from the first net so that averaging N copies of the
    same parameters reproduces them exactly.
    """
    if not nets:
        raise ProtocolError("cannot average an empty model list")
    first = nets[0]
    layers = []
    for i, base in enumerate(first.layers):
        dw = np.mean([net.layers[i].weights - base.weights for net in nets], axis=0)
        db = np.mean([net.layers[i].bias - base.bias for net in nets], axis=0)
        layers.append(Layer(base.weights + dw, base.bias + db, base.activation))
    return DenseNet(tuple(layers))


def _train_local(
    net: DenseNet,
    features: np.ndarray,
    targets: np.ndarray,
    steps: int,
    lr: float,
    params: TrainingParams,
    rng: np.random.Generator,
    round_index: int,
) -> DenseNet:
    sampler = MinibatchSampler(features.shape[0], params.batch_size, rng)
    for _ in range(steps):
        idx = sampler.next_indices()
        # numeric blow-ups surface as non-finite losses, as activations that
        # stop being distributions, or as non-finite stepped parameters
        try:
            loss, grads = nn_core.backward(net, Batch(features[idx], targets[idx]), "kl")
            if not np.isfinite(loss):
                raise DivergedError(round_index)
            net = nn_core.clip_then_step(net, grads, lr, params.clip)
        except (InputError, ConfigurationError) as exc:
            raise DivergedError(round_index) from exc
    return net


def splitme_round(
    state: FederationState,
    plan: RoundPlan,
    datasets: Sequence[LabeledDataset],
    params: TrainingParams,
    ledger: TransferLedger,
    sizes: SplitSizes,
    protocol_tag: str = "splitme",
) -> tuple[FederationState, float]:
    """One mutual-training round; returns the new state and mean train loss.

    The ledger gets exactly one downlink (bottom model + label embeddings)
    and one uplink (bottom model + full-dataset activations) per selected
    client. The reported loss is the client-side divergence on the full
    local data after the round's updates, averaged over the selection.
    """
    if not plan.selected:
        raise ProtocolError("cannot run a round with an empty selection")
    t = state.round_index
    steps = plan.local_updates
    client_bits = payload_bits(state.client_net)
    client_nets: list[DenseNet] = []
    server_nets: list[DenseNet] = []
    losses: list[float] = []
    for m in plan.selected:
        ds = datasets[m]
        embeddings = nn_core.forward(state.inverse_server_net, ds.labels)
        ledger.record(protocol_tag, t, m, DOWNLINK, client_bits + sizes.activation_bits(ds.n))

        rng_c = np.random.default_rng((state.seed, t, m, _CLIENT_STREAM))
        net_c = _train_local(
            state.client_net, ds.features, embeddings, steps, params.lr_client, params, rng_c, t
        )
        payload = UplinkPayload(nn_core.forward(net_c, ds.features), net_c)
        ledger.record(protocol_tag, t, m, UPLINK, client_bits + sizes.activation_bits(ds.n))

        rng_s = np.random.default_rng((state.seed, t, m, _SERVER_STREAM))
        net_s = _train_local(
            state.inverse_server_net,
            ds.labels,
            payload.activations,
            steps,
            params.lr_server,
            params,
            rng_s,
            t,
        )
        loss_m, _ = nn_core.kl_loss(payload.activations, embeddings)
        if not np.isfinite(loss_m):
            raise DivergedError(t)
        client_nets.append(payload.client_net)
        server_nets.append(net_s)
        losses.append(loss_m)
    new_state = replace(
        state,
        client_net=average_nets(client_nets),
        inverse_server_net=average_nets(server_nets),
        round_index=t + 1,
    )
    return new_state, float(np.mean(losses))


def _allreduce_sum(matrices: Sequence[np.ndarray]) -> np.ndarray:
    """Sum per-participant matrices; stands in for a collective reduction."""
    total = matrices[0].copy()
    for mat in matrices[1:]:
        total += mat
    return total


def invert_server_model(
    inverse_server: DenseNet,
    participants: Sequence[tuple[np.ndarray, np.ndarray]],
    gamma: float,
    server_widths: Sequence[int],
    hidden_activation: str = "relu",
    output_activation: str = "softmax",
) -> DenseNet:
    """Recover the forward top model from the trained inverse model.

    Layers are solved front to back. For layer l of the target (1-based,
    P layers total), every participant supplies a supervision matrix: its
    labels pushed through the first P - l inverse layers, which is exactly
    the representation the target's layer l should emit. The inputs are the
    participant's cut-layer activations pushed through the already-recovered
    layers. Each layer costs one all-reduced Gram pair and one ridge solve;
    recovered layers carry zero bias.
    """
    if not participants:
        raise ProtocolError("model recovery needs at least one participant")
    if gamma < 0:
        raise InputError("gamma must be nonnegative")
    server_widths = tuple(int(w) for w in server_widths)
    depth = len(server_widths) - 1
    if depth < 1:
        raise ConfigurationError("the target model needs at least one layer")
    inverse_widths = inverse_server.widths
    if len(inverse_widths) != len(server_widths) or any(
        inverse_widths[j] != server_widths[depth - j] for j in range(depth + 1)
    ):
        raise ConfigurationError(
            f"inverse widths {inverse_widths} do not mirror target widths {server_widths}"
        )

    supervision: list[list[np.ndarray]] = []
    inputs: list[np.ndarray] = []
    for labels, activations in participants:
        labels = np.asarray(labels, dtype=np.float64)
        activations = np.asarray(activations, dtype=np.float64)
        if labels.ndim != 2 or labels.shape[1] != server_widths[-1]:
            raise ConfigurationError("participant labels do not match the class width")
        if activations.ndim != 2 or activations.shape[1] != server_widths[0]:
            raise ConfigurationError("participant activations do not match the cut width")
        if labels.shape[0] != activations.shape[0]:
            raise ConfigurationError("labels and activations must have equal row counts")
        _, trace = nn_core.forward_trace(inverse_server, labels)
        supervision.append([labels] + [post for _, post in trace])
        inputs.append(activations)

    layers: list[Layer] = []
    for l in range(1, depth + 1):
        target_depth = depth - l
        a0 = _allreduce_sum([o.T @ o for o in inputs])
        a1 = _allreduce_sum(
            [o.T @ supervision[i][target_depth] for i, o in enumerate(inputs)]
        )
        w = nn_core.ridge_solve(a0, a1, gamma, label=f"recovered layer {l}")
        activation = output_activation if l == depth else hidden_activation
        layers.append(Layer(w.T, np.zeros(w.shape[1]), activation))
        if l < depth:
            inputs = [np.maximum(o @ w, 0.0) if hidden_activation == "relu" else o @ w for o in inputs]
    return DenseNet(tuple(layers))


def fedavg_round(
    state: FullModelState,
    k: int,
    local_updates: int,
    datasets: Sequence[LabeledDataset],
    params: TrainingParams,
    ledger: TransferLedger,
    protocol_tag: str = "fedavg",
    selected: tuple[int, ...] | None = None,
) -> tuple[FullModelState, float]:
    """Full-model local SGD on K clients, then averaging.

    Each participant costs one full-model downlink and one full-model uplink
    in the ledger. ``selected`` overrides the round's random draw (used by
    the plan-driven variant).
    """
    if local_updates < 1:
        raise ProtocolError("local update count must be at least 1")
    if selected is None:
        selected = random_selection(state.seed, state.round_index, len(datasets), k)
    if not selected:
        raise ProtocolError("cannot run a round with an empty selection")
    t = state.round_index
    model_bits = payload_bits(state.net)
    nets: list[DenseNet] = []
    losses: list[float] = []
    for m in selected:
        ds = datasets[m]
        ledger.record(protocol_tag, t, m, DOWNLINK, model_bits)
        rng = np.random.default_rng((state.seed, t, m, _CLIENT_STREAM))
        net_m = _train_local(
            state.net, ds.features, ds.labels, local_updates, params.lr_full, params, rng, t
        )
        ledger.record(protocol_tag, t, m, UPLINK, model_bits)
        loss_m, _ = nn_core.kl_loss(nn_core.forward(net_m, ds.features), ds.labels)
        nets.append(net_m)
        losses.append(loss_m)
    return replace(state, net=average_nets(nets), round_index=t + 1), float(np.mean(losses))


def oranfed_round(
    state: FullModelState,
    plan: RoundPlan,
    datasets: Sequence[LabeledDataset],
    params: TrainingParams,
    ledger: TransferLedger,
) -> tuple[FullModelState, float]:
    """Fedavg with selection and local-update count supplied by a plan."""
    if not plan.selected:
        raise ProtocolError("cannot run a round with an empty selection")
    return fedavg_round(
        state,
        len(plan.selected),
        plan.local_updates,
        datasets,
        params,
        ledger,
        protocol_tag="oranfed",
        selected=plan.selected,
    )


def vanilla_sfl_round(
    state: SplitPairState,
    k: int,
    local_updates: int,
    datasets: Sequence[LabeledDataset],
    params: TrainingParams,
    ledger: TransferLedger,
    protocol_tag: str = "sfl",
    selected: tuple[int, ...] | None = None,
) -> tuple[SplitPairState, float]:
    """Vanilla split learning: activations up and gradients down per update.

    The ledger records 2E batch-sized events per selected client per round;
    the occasional model aggregation traffic is not billed.
    """
    if local_updates < 1:
        raise ProtocolError("local update count must be at least 1")
    if selected is None:
        selected = random_selection(state.seed, state.round_index, len(datasets), k)
    if not selected:
        raise ProtocolError("cannot run a round with an empty selection")
    t = state.round_index
    cut_row_bits = state.client_net.out_dim * 64
    client_nets: list[DenseNet] = []
    server_nets: list[DenseNet] = []
    losses: list[float] = []
    for m in selected:
        ds = datasets[m]
        rng = np.random.default_rng((state.seed, t, m, _CLIENT_STREAM))
        sampler = MinibatchSampler(ds.n, params.batch_size, rng)
        net_c, net_s = state.client_net, state.server_net
        for _ in range(local_updates):
            idx = sampler.next_indices()
            x, y = ds.features[idx], ds.labels[idx]
            try:
                acts, trace_c = nn_core.forward_trace(net_c, x)
                ledger.record(protocol_tag, t, m, UPLINK, len(idx) * cut_row_bits)
                out, trace_s = nn_core.forward_trace(net_s, acts)
                loss, grad_out = nn_core.kl_loss(out, y)
                if not np.isfinite(loss):
                    raise DivergedError(t)
                grads_s, grad_acts = nn_core.backward_from_output_grad(net_s, acts, trace_s, grad_out)
                ledger.record(protocol_tag, t, m, DOWNLINK, len(idx) * cut_row_bits)
                grads_c, _ = nn_core.backward_from_output_grad(net_c, x, trace_c, grad_acts)
                net_c = nn_core.clip_then_step(net_c, grads_c, params.lr_full, params.clip)
                net_s = nn_core.clip_then_step(net_s, grads_s, params.lr_full, params.clip)
            except (InputError, ConfigurationError) as exc:
                raise DivergedError(t) from exc
        full_out = nn_core.forward(net_s, nn_core.forward(net_c, ds.features))
        loss_m, _ = nn_core.kl_loss(full_out, ds.labels)
        client_nets.append(net_c)
        server_nets.append(net_s)
        losses.append(loss_m)
    new_state = replace(
        state,
        client_net=average_nets(client_nets),
        server_net=average_nets(server_nets),
        round_index=t + 1,
    )
    return new_state, float(np.mean(losses))
