"""Dense float64 substrate: a small tanh MLP velocity field with hand-written
reverse-mode gradients, a central-difference gradient oracle, Adam, and the
binary checkpoint format.

Arrays are plain ``numpy.ndarray`` of dtype float64. Layer weights are stored
as ``(out, in)`` matrices so a batch ``X`` of shape ``(B, in)`` maps to
``X @ W.T + b``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .fsutil import atomic_write_bytes
from .rng import as_generator

TIME_FEATURE_DIM = 4


class ContractError(ValueError):
    """An operation was called outside its documented preconditions."""


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"non-finite gradient at optimizer step {step}; update aborted")
        self.step = step


class CheckpointError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def time_features(t) -> np.ndarray:
    """[t, sin 2πt, cos 2πt, t²] for a scalar or a vector of times."""
    t = np.asarray(t, dtype=np.float64)
    return np.stack([t, np.sin(2 * np.pi * t), np.cos(2 * np.pi * t), t * t], axis=-1)


@dataclass
class VelocityNet:
    """Feed-forward velocity field u(x_t, t | context).

    Input is ``concat(x_t, context, time_features(t))``; hidden layers use tanh,
    the output layer is linear with ``2 * d_s`` units.
    """

    d_s: int
    context_dim: int
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def input_dim(self) -> int:
        return 2 * self.d_s + self.context_dim + TIME_FEATURE_DIM

    @property
    def output_dim(self) -> int:
        return 2 * self.d_s

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim] + [w.shape[0] for w in self.weights]

    @classmethod
    def init(cls, d_s: int, context_dim: int, hidden=(128, 128), rng=0) -> "VelocityNet":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for weights and biases."""
        rng = as_generator(rng)
        sizes = [2 * d_s + context_dim + TIME_FEATURE_DIM, *hidden, 2 * d_s]
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(d_s, context_dim, weights, biases)

    @classmethod
    def zeros(cls, d_s: int, context_dim: int, hidden=()) -> "VelocityNet":
        sizes = [2 * d_s + context_dim + TIME_FEATURE_DIM, *hidden, 2 * d_s]
        weights = [np.zeros((o, i)) for i, o in zip(sizes[:-1], sizes[1:])]
        biases = [np.zeros(o) for o in sizes[1:]]
        return cls(d_s, context_dim, weights, biases)

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ContractError("need one bias per weight matrix and at least one layer")
        fan_in = self.input_dim
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or w.shape[1] != fan_in:
                raise ContractError(f"layer {i}: weight expects fan_in {fan_in}, got shape {w.shape}")
            if b.shape != (w.shape[0],):
                raise ContractError(f"layer {i}: bias shape {b.shape} != ({w.shape[0]},)")
            fan_in = w.shape[0]
        if fan_in != self.output_dim:
            raise ContractError(f"output width {fan_in} != 2*d_s = {self.output_dim}")

    def params(self) -> list[np.ndarray]:
        """Parameter arrays in canonical order [W0, b0, W1, b1, ...] (live views)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def set_params(self, arrays) -> None:
        arrays = list(arrays)
        for i in range(len(self.weights)):
            self.weights[i] = np.array(arrays[2 * i], dtype=np.float64)
            self.biases[i] = np.array(arrays[2 * i + 1], dtype=np.float64)
        self.__post_init__()

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "VelocityNet":
        return VelocityNet(
            self.d_s,
            self.context_dim,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )

    def _assemble(self, x_t, t, context) -> np.ndarray:
        x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
        context = np.atleast_2d(np.asarray(context, dtype=np.float64))
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        if x_t.shape[1] != self.output_dim:
            raise ContractError(f"x_t has dimension {x_t.shape[1]}, expected 2*d_s = {self.output_dim}")
        if context.shape[1] != self.context_dim:
            raise ContractError(f"context has dimension {context.shape[1]}, expected d_t+d_v = {self.context_dim}")
        n = x_t.shape[0]
        if context.shape[0] != n:
            if context.shape[0] != 1:
                raise ContractError(f"context batch {context.shape[0]} != x_t batch {n}")
            context = np.broadcast_to(context, (n, self.context_dim))
        if t.shape[0] != n:
            if t.shape[0] != 1:
                raise ContractError(f"t batch {t.shape[0]} != x_t batch {n}")
            t = np.broadcast_to(t, (n,))
        if np.any((t < 0.0) | (t > 1.0)):
            raise ContractError("t must lie in [0, 1]")
        return np.concatenate([x_t, context, time_features(t)], axis=1)

    def forward_batch(self, x_t, t, context, keep_cache: bool = False):
        """Batched forward pass; rows of ``x_t`` are independent inputs.

        Returns the ``(B, 2*d_s)`` output, and the activation cache when
        ``keep_cache`` is set.
        """
        h = self._assemble(x_t, t, context)
        acts = [h]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T + b
            h = z if i == last else np.tanh(z)
            acts.append(h)
        if keep_cache:
            return h, acts
        return h

    def backward_batch(self, acts, upstream) -> list[np.ndarray]:
        """Gradients of sum_b <out_b, upstream_b> w.r.t. params, canonical order."""
        g = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
        if g.shape != acts[-1].shape:
            raise ContractError(f"upstream gradient shape {g.shape} != output shape {acts[-1].shape}")
        n_layers = len(self.weights)
        grads: list[np.ndarray] = [None] * (2 * n_layers)  # type: ignore[list-item]
        for i in range(n_layers - 1, -1, -1):
            if i != n_layers - 1:
                # acts[i + 1] = tanh(z_i)
                g = g * (1.0 - acts[i + 1] ** 2)
            grads[2 * i] = g.T @ acts[i]
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0:
                g = g @ self.weights[i]
        return grads


def net_forward(net: VelocityNet, x_t, t: float, context) -> np.ndarray:
    """Velocity prediction for a single state; shape ``(2*d_s,)``."""
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.ndim != 1:
        raise ContractError(f"x_t must be a vector, got shape {x_t.shape}")
    return net.forward_batch(x_t, t, context)[0]


def net_backward(net: VelocityNet, x_t, t: float, context, upstream_grad) -> list[np.ndarray]:
    _, acts = net.forward_batch(np.asarray(x_t, dtype=np.float64), t, context, keep_cache=True)
    return net.backward_batch(acts, np.asarray(upstream_grad, dtype=np.float64)[None, :])


def finite_diff_grad(net: VelocityNet, x_t, t: float, context, upstream_grad, step: float = 1e-5,
                     objective=None) -> list[np.ndarray]:
    """Central differences of a scalar objective, one perturbation per parameter.

    The default objective is ``<net_forward(...), upstream_grad>``. A custom
    ``objective(output) -> float`` can be passed to check composite losses
    through the network.
    """
    if step <= 0:
        raise ContractError("finite-difference step must be positive")
    upstream_grad = np.asarray(upstream_grad, dtype=np.float64)
    if objective is None:
        def objective(out):
            return float(out @ upstream_grad)

    probe = net.copy()
    grads = []
    for p in probe.params():
        g = np.zeros_like(p)
        flat_p, flat_g = p.reshape(-1), g.reshape(-1)
        for j in range(flat_p.size):
            orig = flat_p[j]
            flat_p[j] = orig + step
            f_plus = objective(net_forward(probe, x_t, t, context))
            flat_p[j] = orig - step
            f_minus = objective(net_forward(probe, x_t, t, context))
            flat_p[j] = orig
            flat_g[j] = (f_plus - f_minus) / (2 * step)
        grads.append(g)
    return grads


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    learning_rate: float = 1e-3

    @classmethod
    def for_params(cls, params, learning_rate: float = 1e-3, beta1: float = 0.9,
                   beta2: float = 0.999, epsilon: float = 1e-8) -> "AdamState":
        return cls(
            [np.zeros_like(p) for p in params],
            [np.zeros_like(p) for p in params],
            0, beta1, beta2, epsilon, learning_rate,
        )


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState):
    """Bias-corrected Adam update applied in place; returns ``(params, state)``.

    A non-finite gradient raises :class:`NonFiniteGradientError` before anything
    is modified.
    """
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ContractError("params, grads and optimizer state must have the same length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ContractError(f"param {i}: shape {p.shape} != grad shape {g.shape}")
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise NonFiniteGradientError(state.step_count + 1)

    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step_count
    bc2 = 1.0 - b2 ** state.step_count
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return params, state


# -- checkpoint format -------------------------------------------------------
#
# "FCKP" | u16 version | arrays...
# array: u8 rank | rank x u32 dims | prod(dims) x f64, all little-endian.
# Order: net params [W0, b0, ...], Adam first moments, Adam second moments,
# then rank-0 scalars step_count, beta1, beta2, epsilon, learning_rate.

MAGIC = b"FCKP"
FORMAT_VERSION = 1
_N_ADAM_SCALARS = 5


def _pack_array(a) -> bytes:
    a = np.asarray(a, dtype="<f8")
    out = struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return out + a.tobytes(order="C")


def encode_checkpoint(net: VelocityNet, adam: AdamState) -> bytes:
    chunks = [MAGIC, struct.pack("<H", FORMAT_VERSION)]
    arrays = net.params() + adam.first_moment + adam.second_moment
    arrays += [np.float64(adam.step_count), adam.beta1, adam.beta2, adam.epsilon, adam.learning_rate]
    chunks += [_pack_array(a) for a in arrays]
    return b"".join(chunks)


def save_checkpoint(path, net: VelocityNet, adam: AdamState):
    return atomic_write_bytes(path, encode_checkpoint(net, adam))


def _read(buf: bytes, offset: int, n: int, what: str) -> bytes:
    if offset + n > len(buf):
        raise CheckpointError(f"truncated checkpoint while reading {what}: need {n} bytes, "
                              f"{len(buf) - offset} left", offset)
    return buf[offset:offset + n]


def decode_checkpoint(buf: bytes) -> tuple[VelocityNet, AdamState]:
    if _read(buf, 0, 4, "magic") != MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}", 0)
    (version,) = struct.unpack("<H", _read(buf, 4, 2, "format version"))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (this build reads {FORMAT_VERSION})", 4)
    offset = 6
    arrays = []
    while offset < len(buf):
        (rank,) = struct.unpack("<B", _read(buf, offset, 1, f"rank of array {len(arrays)}"))
        offset += 1
        dims = struct.unpack(f"<{rank}I", _read(buf, offset, 4 * rank, f"dims of array {len(arrays)}"))
        offset += 4 * rank
        count = int(np.prod(dims, dtype=np.int64))
        raw = _read(buf, offset, 8 * count, f"values of array {len(arrays)}")
        arrays.append(np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims))
        offset += 8 * count

    n_param = len(arrays) - _N_ADAM_SCALARS
    if n_param <= 0 or n_param % 6:
        raise CheckpointError(f"checkpoint holds {len(arrays)} arrays; expected 6*layers + {_N_ADAM_SCALARS}", offset)
    n_param //= 3
    params = arrays[:n_param]
    first = arrays[n_param:2 * n_param]
    second = arrays[2 * n_param:3 * n_param]
    scalars = [float(a) for a in arrays[3 * n_param:]]
    d_s = params[-1].shape[0] // 2
    context_dim = params[0].shape[1] - 2 * d_s - TIME_FEATURE_DIM
    try:
        net = VelocityNet(d_s, context_dim, list(params[0::2]), list(params[1::2]))
    except ContractError as exc:
        raise CheckpointError(f"inconsistent layer shapes: {exc}", 6) from exc
    for p, m, v in zip(params, first, second):
        if m.shape != p.shape or v.shape != p.shape:
            raise CheckpointError("optimizer moment shapes do not match parameters", offset)
    adam = AdamState(list(first), list(second), int(scalars[0]), *scalars[1:])
    return net, adam


def load_checkpoint(path) -> tuple[VelocityNet, AdamState]:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
