"""Model architecture, client/server splitting, sizing, and serialization.

The full classifier is a dense stack ``widths[0] -> ... -> widths[-1]`` with
relu hidden layers and a softmax output. Splitting hands the first
``cut_index`` layers to the client; for the mutual-learning protocol the
client's cut layer emits a softmax so its activations are distributions, and
the server trains an *inverse* net with the server-side widths reversed
(labels in, cut-width distribution out).

Parameter files use a little-endian binary layout::

    magic "DNETPRM1" | u32 version | u32 layer_count
    per layer: u32 rows | u32 cols | u8 activation_code
    per layer: rows*cols f64 weights (row-major) | rows f64 bias
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, FormatError
from .nn_core import DenseNet, Layer, init_net

MAGIC = b"DNETPRM1"
FORMAT_VERSION = 1
BITS_PER_SCALAR = 64

_ACT_CODES = {"identity": 0, "relu": 1, "softmax": 2}
_CODE_ACTS = {v: k for k, v in _ACT_CODES.items()}


def param_count(widths: Sequence[int]) -> int:
    """Weights plus biases for a dense stack over the given widths."""
    return sum(widths[i + 1] * (widths[i] + 1) for i in range(len(widths) - 1))


@dataclass(frozen=True)
class ArchitectureSpec:
    """Layer widths of the full model and where to cut it."""

    layer_widths: tuple[int, ...]
    cut_index: int

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if len(self.layer_widths) < 3:
            raise ConfigurationError("need at least two layers to split a model")
        if any(w < 1 for w in self.layer_widths):
            raise ConfigurationError("layer widths must be positive")
        if not 1 <= self.cut_index < self.n_layers:
            raise ConfigurationError(
                f"cut_index must lie in [1, {self.n_layers - 1}], got {self.cut_index}"
            )

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def n_classes(self) -> int:
        return self.layer_widths[-1]

    @property
    def cut_width(self) -> int:
        return self.layer_widths[self.cut_index]

    @property
    def client_widths(self) -> tuple[int, ...]:
        return self.layer_widths[: self.cut_index + 1]

    @property
    def server_widths(self) -> tuple[int, ...]:
        return self.layer_widths[self.cut_index :]

    @property
    def inverse_server_widths(self) -> tuple[int, ...]:
        return tuple(reversed(self.server_widths))


@dataclass(frozen=True)
class SplitSizes:
    """Payload sizing for one split: full-model bits, client share, cut width."""

    model_bits: int  # d: entire (client + server) model payload
    client_fraction: float  # omega: client params / total params
    cut_width: int
    bits_per_scalar: int = BITS_PER_SCALAR

    def __post_init__(self):
        if not 0.0 < self.client_fraction < 1.0:
            raise ConfigurationError("client_fraction must lie strictly in (0, 1)")

    def activation_bits(self, rows: int) -> int:
        """Size of a cut-layer activation matrix with the given row count."""
        return rows * self.cut_width * self.bits_per_scalar

    @property
    def client_model_bits(self) -> float:
        return self.client_fraction * self.model_bits


def build_full(spec: ArchitectureSpec, seed) -> DenseNet:
    """The unsplit classifier: relu hidden layers, softmax output."""
    return init_net(spec.layer_widths, seed)


def split(spec: ArchitectureSpec, seed) -> tuple[DenseNet, DenseNet, SplitSizes]:
    """Build the client-side net, the inverse server-side net, and the sizes.

    The client net ends in a softmax over the cut width so its activations
    are distributions; the inverse net maps label vectors to the same
    simplex with the server widths reversed. Initialization is deterministic
    in ``seed``.
    """
    client = init_net(spec.client_widths, (seed, 0))
    inverse_server = init_net(spec.inverse_server_widths, (seed, 1))
    total = param_count(spec.layer_widths)
    client_params = param_count(spec.client_widths)
    sizes = SplitSizes(
        model_bits=BITS_PER_SCALAR * total,
        client_fraction=client_params / total,
        cut_width=spec.cut_width,
    )
    return client, inverse_server, sizes


def split_full(net: DenseNet, cut_index: int) -> tuple[DenseNet, DenseNet]:
    """Cut an existing full net into (bottom, top) sub-nets for split training."""
    if not 1 <= cut_index < len(net.layers):
        raise ConfigurationError(
            f"cut_index must lie in [1, {len(net.layers) - 1}], got {cut_index}"
        )
    return DenseNet(net.layers[:cut_index]), DenseNet(net.layers[cut_index:])


def join(bottom: DenseNet, top: DenseNet) -> DenseNet:
    """Concatenate two sub-nets; dimension chaining is re-validated."""
    return DenseNet(bottom.layers + top.layers)


def payload_bits(params: DenseNet | Sequence[Layer]) -> int:
    """Transfer size of a parameter set: 64 bits per scalar, no compression."""
    layers = params.layers if isinstance(params, DenseNet) else tuple(params)
    return BITS_PER_SCALAR * sum(layer.param_count for layer in layers)


def save_params(net: DenseNet, path) -> None:
    """Write a net to the binary layout documented in the module docstring."""
    path = Path(path)
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(net.layers))]
    for layer in net.layers:
        rows, cols = layer.weights.shape
        chunks.append(struct.pack("<IIB", rows, cols, _ACT_CODES[layer.activation]))
    for layer in net.layers:
        chunks.append(layer.weights.astype("<f8").tobytes(order="C"))
        chunks.append(layer.bias.astype("<f8").tobytes(order="C"))
    path.write_bytes(b"".join(chunks))


def load_params(path) -> DenseNet:
    """Read a net back; any structural anomaly raises FormatError."""
    blob = Path(path).read_bytes()
    view = memoryview(blob)
    offset = 0

    def take(n: int) -> memoryview:
        nonlocal offset
        if offset + n > len(blob):
            raise FormatError(f"file truncated at byte {offset} (wanted {n} more)")
        out = view[offset : offset + n]
        offset += n
        return out

    if bytes(take(len(MAGIC))) != MAGIC:
        raise FormatError("bad magic string; not a parameter file")
    version, n_layers = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    if n_layers < 1:
        raise FormatError("parameter file declares no layers")
    headers = []
    for i in range(n_layers):
        rows, cols, code = struct.unpack("<IIB", take(9))
        if rows < 1 or cols < 1:
            raise FormatError(f"layer {i} has non-positive shape ({rows}, {cols})")
        if code not in _CODE_ACTS:
            raise FormatError(f"layer {i} has unknown activation code {code}")
        headers.append((rows, cols, _CODE_ACTS[code]))
    layers = []
    for i, (rows, cols, act) in enumerate(headers):
        w = np.frombuffer(take(8 * rows * cols), dtype="<f8").reshape(rows, cols)
        b = np.frombuffer(take(8 * rows), dtype="<f8")
        layers.append(Layer(w.copy(), b.copy(), act))
    if offset != len(blob):
        raise FormatError(f"{len(blob) - offset} trailing bytes after the last layer")
    try:
        return DenseNet(tuple(layers))
    except ConfigurationError as exc:
        raise FormatError(f"layer shapes do not chain: {exc}") from exc
