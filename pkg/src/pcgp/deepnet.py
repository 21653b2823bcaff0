#!/usr/bin/env python3
"""Dense encoder/decoder network with hand-written reverse-mode gradients.

The encoder output is the feature map of the deep kernel; the decoder only
serves the denoising-autoencoder reconstruction term. Inputs are handled as
row batches: a (n, P) array holds n flattened fields. Weights are stored
(out, in) so a layer computes act(H W^T + b).

Checkpoint file layout (PCGPNET1, all integers little-endian u32):

    magic "PCGPNET1"
    layer count
    per layer: rows, cols, activation tag (u8),
               rows*cols f64 weights (row-major), rows f64 biases
    encoder_end
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from pcgp import common as rc
from pcgp import gp_core
from pcgp.binio import ByteReader, f64_bytes

MAGIC = b"PCGPNET1"
ACTIVATIONS = {"linear": 0, "tanh": 1, "relu": 2, "sigmoid": 3}
_TAG_NAMES = {tag: name for name, tag in ACTIVATIONS.items()}


@dataclass(frozen=True, eq=False)
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str

    @property
    def fan_in(self) -> int:
        return self.weight.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True, eq=False)
class NetworkParams:
    layers: tuple[Layer, ...]
    encoder_end: int

    def __post_init__(self):
        if not 0 < self.encoder_end < len(self.layers):
            raise rc.InputError(
                f"encoder_end {self.encoder_end} must split {len(self.layers)} layers"
            )
        for index, layer in enumerate(self.layers):
            if layer.activation not in ACTIVATIONS:
                raise rc.InputError(f"layer {index}: unknown activation {layer.activation!r}")
            if layer.bias.shape != (layer.fan_out,):
                raise rc.InputError(f"layer {index}: bias shape {layer.bias.shape} mismatches weight")
            if index and layer.fan_in != self.layers[index - 1].fan_out:
                raise rc.InputError(
                    f"layer {index} expects {layer.fan_in} inputs, "
                    f"previous layer gives {self.layers[index - 1].fan_out}"
                )

    @property
    def encoder(self) -> tuple[Layer, ...]:
        return self.layers[:self.encoder_end]

    @property
    def decoder(self) -> tuple[Layer, ...]:
        return self.layers[self.encoder_end:]

    @property
    def input_dim(self) -> int:
        return self.layers[0].fan_in

    @property
    def latent_dim(self) -> int:
        return self.layers[self.encoder_end - 1].fan_out

    def arrays(self) -> list[np.ndarray]:
        """Weights and biases interleaved, layer by layer."""
        out: list[np.ndarray] = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def replace_arrays(self, arrays: list[np.ndarray]) -> "NetworkParams":
        layers = tuple(
            Layer(arrays[2 * i], arrays[2 * i + 1], layer.activation)
            for i, layer in enumerate(self.layers)
        )
        return NetworkParams(layers, self.encoder_end)

    def count(self) -> int:
        return sum(a.size for a in self.arrays())

    def vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_vector(self, vector: np.ndarray) -> "NetworkParams":
        arrays, start = [], 0
        for a in self.arrays():
            arrays.append(np.array(vector[start:start + a.size], dtype=np.float64).reshape(a.shape))
            start += a.size
        return self.replace_arrays(arrays)


@dataclass(frozen=True, eq=False)
class GradientSet:
    """dLoss/dtheta, interleaved like NetworkParams.arrays()."""

    arrays: tuple[np.ndarray, ...]

    @classmethod
    def zeros_like(cls, params: NetworkParams) -> "GradientSet":
        return cls(tuple(np.zeros_like(a) for a in params.arrays()))

    def vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays])


@dataclass(frozen=True, eq=False)
class AdamState:
    m: tuple[np.ndarray, ...]
    v: tuple[np.ndarray, ...]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: NetworkParams) -> "AdamState":
        zeros = tuple(np.zeros_like(a) for a in params.arrays())
        return cls(zeros, tuple(z.copy() for z in zeros), 0)


def init_network(
    layer_dims: list[int], encoder_end: int, seed: int, activation: str = "tanh"
) -> NetworkParams:
    """Uniform(-a, a) weights with a = sqrt(6 / (fan_in + fan_out)), zero biases.

    Hidden layers use ``activation``; the encoder output and the decoder
    output are linear.
    """
    dims = [int(d) for d in layer_dims]
    if len(dims) < 3 or any(d <= 0 for d in dims):
        raise rc.InputError(f"invalid layer dimensions {layer_dims}")
    n_layers = len(dims) - 1
    if not 0 < encoder_end < n_layers:
        raise rc.InputError(f"encoder_end {encoder_end} must lie in (0, {n_layers})")
    if activation not in ACTIVATIONS:
        raise rc.InputError(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed)
    layers = []
    for index, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weight = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        linear = index in (encoder_end - 1, n_layers - 1)
        layers.append(Layer(weight, np.zeros(fan_out), "linear" if linear else activation))
    return NetworkParams(tuple(layers), encoder_end)


def _activate(tag: str, z: np.ndarray) -> np.ndarray:
    match tag:
        case "linear":
            return z
        case "tanh":
            return np.tanh(z)
        case "relu":
            return np.maximum(z, 0.0)
        case "sigmoid":
            return 1.0 / (1.0 + np.exp(-z))
    raise rc.InputError(f"unknown activation {tag!r}")


def _activate_grad(tag: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    match tag:
        case "linear":
            return np.ones_like(z)
        case "tanh":
            return 1.0 - a * a
        case "relu":
            return np.where(z > 0.0, 1.0, 0.0)
        case "sigmoid":
            return a * (1.0 - a)
    raise rc.InputError(f"unknown activation {tag!r}")


def _require_finite(name: str, array: np.ndarray) -> None:
    if not np.all(np.isfinite(array)):
        raise rc.NumericalError(f"non-finite values in {name}", tensor=name)


def _as_rows(x, dim: int, name: str) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    rows = arr[None, :] if single else arr
    if rows.ndim != 2 or rows.shape[1] != dim:
        raise rc.InputError(f"{name} has shape {arr.shape}, expected trailing dimension {dim}")
    return rows, single


@dataclass
class Tape:
    """Layer inputs and pre-activations recorded by forward()."""

    inputs: list[np.ndarray] = field(default_factory=list)
    preacts: list[np.ndarray] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)


def forward(layers: tuple[Layer, ...], X: np.ndarray, label: str = "net", check: bool = False) -> tuple[Tape, np.ndarray]:
    tape = Tape()
    H = X
    for index, layer in enumerate(layers):
        Zl = H @ layer.weight.T + layer.bias
        A = _activate(layer.activation, Zl)
        if check:
            _require_finite(f"{label} layer {index} output", A)
        tape.inputs.append(H)
        tape.preacts.append(Zl)
        tape.outputs.append(A)
        H = A
    return tape, H


def backward(layers: tuple[Layer, ...], tape: Tape, d_out: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Return interleaved [dW0, db0, dW1, db1, ...] and the input adjoint."""
    grads: list[np.ndarray] = [None] * (2 * len(layers))
    dH = d_out
    for index in range(len(layers) - 1, -1, -1):
        layer = layers[index]
        dZ = dH * _activate_grad(layer.activation, tape.preacts[index], tape.outputs[index])
        grads[2 * index] = dZ.T @ tape.inputs[index]
        grads[2 * index + 1] = dZ.sum(axis=0)
        dH = dZ @ layer.weight
    return grads, dH


def encode(params: NetworkParams, x) -> np.ndarray:
    rows, single = _as_rows(x, params.input_dim, "encoder input")
    _, Z = forward(params.encoder, rows)
    return Z[0] if single else Z


def decode(params: NetworkParams, z) -> np.ndarray:
    rows, single = _as_rows(z, params.latent_dim, "decoder input")
    _, R = forward(params.decoder, rows)
    return R[0] if single else R


def reconstruct(params: NetworkParams, x) -> np.ndarray:
    return decode(params, encode(params, x))


def deep_kernel(params: NetworkParams, x1, x2, l: float, squared: bool = False) -> float:
    return gp_core.se_kernel(encode(params, x1), encode(params, x2), l, squared)


class LossGraph(Protocol):
    """A scalar loss over the network's outputs.

    ``clean_inputs`` feed the kernel path; ``noisy_inputs`` (or None) feed the
    autoencoder path. ``head`` receives the encoded clean inputs and the
    reconstructions of the noisy inputs and returns the loss together with
    its adjoints with respect to both.
    """

    clean_inputs: np.ndarray
    noisy_inputs: np.ndarray | None

    def head(self, Z: np.ndarray, R: np.ndarray | None) -> tuple[float, np.ndarray, np.ndarray | None]:
        ...


def backprop(params: NetworkParams, graph: LossGraph) -> tuple[float, GradientSet]:
    clean, _ = _as_rows(graph.clean_inputs, params.input_dim, "clean inputs")
    _require_finite("clean inputs", clean)
    tape_clean, Z = forward(params.encoder, clean, "encoder", check=True)

    R = tape_noisy = tape_dec = None
    if graph.noisy_inputs is not None:
        noisy, _ = _as_rows(graph.noisy_inputs, params.input_dim, "noisy inputs")
        _require_finite("noisy inputs", noisy)
        tape_noisy, Zn = forward(params.encoder, noisy, "encoder (noisy)", check=True)
        tape_dec, R = forward(params.decoder, Zn, "decoder", check=True)

    loss, dZ, dR = graph.head(Z, R)
    if not np.isfinite(loss):
        raise rc.NumericalError(f"non-finite loss {loss}", tensor="loss")
    _require_finite("feature adjoint", dZ)

    grads, _ = backward(params.encoder, tape_clean, dZ)
    if dR is not None and R is not None:
        _require_finite("reconstruction adjoint", dR)
        dec_grads, dZn = backward(params.decoder, tape_dec, dR)
        enc_grads, _ = backward(params.encoder, tape_noisy, dZn)
        grads = [g + h for g, h in zip(grads, enc_grads)] + dec_grads
    else:
        grads = grads + [np.zeros_like(a) for a in params.arrays()[len(grads):]]
    for index, g in enumerate(grads):
        _require_finite(f"gradient of parameter array {index}", g)
    return float(loss), GradientSet(tuple(grads))


def adam_step(
    params: NetworkParams,
    grads: GradientSet,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[NetworkParams, AdamState]:
    arrays = params.arrays()
    if len(grads.arrays) != len(arrays) or len(state.m) != len(arrays) or any(
        g.shape != p.shape or m.shape != p.shape
        for g, m, p in zip(grads.arrays, state.m, arrays)
    ):
        raise rc.InputError("gradient or optimizer state does not match the network shape")
    t = state.t + 1
    correct1 = 1.0 - beta1**t
    correct2 = 1.0 - beta2**t
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(arrays, grads.arrays, state.m, state.v):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        new_params.append(p - lr * (m / correct1) / (np.sqrt(v / correct2) + eps))
        new_m.append(m)
        new_v.append(v)
    return params.replace_arrays(new_params), AdamState(tuple(new_m), tuple(new_v), t)


def save_network(params: NetworkParams, path: str | Path) -> None:
    chunks = [MAGIC, struct.pack("<I", len(params.layers))]
    for layer in params.layers:
        chunks.append(struct.pack("<IIB", layer.fan_out, layer.fan_in, ACTIVATIONS[layer.activation]))
        chunks.append(f64_bytes(layer.weight))
        chunks.append(f64_bytes(layer.bias))
    chunks.append(struct.pack("<I", params.encoder_end))
    Path(path).write_bytes(b"".join(chunks))


def load_network(path: str | Path) -> NetworkParams:
    reader = ByteReader(Path(path).read_bytes(), str(path))
    reader.expect_magic(MAGIC)
    (count,) = reader.unpack("I", "layer count")
    layers = []
    for index in range(count):
        at = reader.offset
        rows, cols, tag = reader.unpack("IIB", f"layer {index} header")
        if tag not in _TAG_NAMES:
            raise rc.FormatError(f"layer {index}: unknown activation tag {tag}", at, str(path))
        weight = reader.floats(rows * cols, f"layer {index} weights").reshape(rows, cols)
        bias = reader.floats(rows, f"layer {index} biases")
        layers.append(Layer(weight, bias, _TAG_NAMES[tag]))
    at = reader.offset
    (encoder_end,) = reader.unpack("I", "encoder_end")
    reader.expect_end()
    try:
        return NetworkParams(tuple(layers), encoder_end)
    except rc.InputError as exc:
        raise rc.FormatError(str(exc), at, str(path)) from None
