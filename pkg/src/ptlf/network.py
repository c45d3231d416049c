"""Layered dense encoder with hand-written backprop and per-layer freezing.

The network is one ordered chain of dense layers tagged by role: backbone
layers first, then the projector, then the predictor.  Only backbone layers
can be frozen by the freezing policy; the SSL head always trains.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

CHECKPOINT_MAGIC = b"PTLF"
CHECKPOINT_VERSION = 1


class Activation(str, Enum):
    RELU = "relu"
    TANH = "tanh"
    IDENTITY = "identity"


class Role(str, Enum):
    BACKBONE = "backbone"
    PROJECTOR = "projector"
    PREDICTOR = "predictor"


_ROLE_ORDER = (Role.BACKBONE, Role.PROJECTOR, Role.PREDICTOR)
_ROLE_CODE = {Role.BACKBONE: 0, Role.PROJECTOR: 1, Role.PREDICTOR: 2}
_ACT_CODE = {Activation.RELU: 0, Activation.TANH: 1, Activation.IDENTITY: 2}


def activate(kind: Activation, z: np.ndarray) -> np.ndarray:
    if kind is Activation.RELU:
        return np.maximum(z, 0.0)
    if kind is Activation.TANH:
        return np.tanh(z)
    return z


def _activation_grad(kind: Activation, z: np.ndarray, g: np.ndarray) -> np.ndarray:
    if kind is Activation.RELU:
        return g * (z > 0)
    if kind is Activation.TANH:
        t = np.tanh(z)
        return g * (1.0 - t * t)
    return g


@dataclass
class DenseLayer:
    weight: np.ndarray  # out x in
    bias: np.ndarray  # out
    activation: Activation = Activation.RELU
    role: Role = Role.BACKBONE
    frozen: bool = False
    cached_input: np.ndarray | None = field(default=None, repr=False, compare=False)
    cached_preact: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        self.activation = Activation(self.activation)
        self.role = Role(self.role)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError(
                f"inconsistent layer shapes: weight {self.weight.shape}, bias {self.bias.shape}"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def release_cache(self):
        self.cached_input = None
        self.cached_preact = None


@dataclass
class GradientSet:
    """Weight/bias gradients aligned with ``Network.layers``.

    Layers whose gradients were not computed (frozen during backward) carry
    zero arrays and ``applied[i] = False``.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    applied: list[bool]
    batch_size: int

    @classmethod
    def zeros_like(cls, net: "Network", batch_size: int = 0) -> "GradientSet":
        return cls(
            weights=[np.zeros_like(l.weight) for l in net.layers],
            biases=[np.zeros_like(l.bias) for l in net.layers],
            applied=[False] * len(net.layers),
            batch_size=batch_size,
        )

    @classmethod
    def mean(cls, sets: Sequence["GradientSet"]) -> "GradientSet":
        if not sets:
            raise ValueError("cannot average an empty list of gradient sets")
        n = len(sets)
        weights = [sum(s.weights[i] for s in sets[1:]) + sets[0].weights[i] for i in range(len(sets[0].weights))]
        biases = [sum(s.biases[i] for s in sets[1:]) + sets[0].biases[i] for i in range(len(sets[0].biases))]
        return cls(
            weights=[w / n for w in weights],
            biases=[b / n for b in biases],
            applied=[all(s.applied[i] for s in sets) for i in range(len(sets[0].applied))],
            batch_size=sum(s.batch_size for s in sets),
        )

    def add_(self, other: "GradientSet", scale: float = 1.0) -> "GradientSet":
        for i in range(len(self.weights)):
            self.weights[i] = self.weights[i] + scale * other.weights[i]
            self.biases[i] = self.biases[i] + scale * other.biases[i]
            self.applied[i] = self.applied[i] or other.applied[i]
        return self


class Network:
    def __init__(self, layers: Sequence[DenseLayer]):
        layers = list(layers)
        if not layers:
            raise ValueError("network needs at least one layer")
        ranks = [_ROLE_ORDER.index(l.role) for l in layers]
        if ranks != sorted(ranks):
            raise ValueError("layers must be ordered backbone, projector, predictor")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ValueError(
                    f"adjacent layer dims incompatible: {prev.weight.shape} -> {nxt.weight.shape}"
                )
        self.layers = layers
        self.stage_outputs: dict[Role, np.ndarray] = {}
        self._last_stop: int | None = None

    @classmethod
    def build(
        cls,
        input_dim: int,
        *,
        backbone_layers: int = 8,
        width: int = 64,
        projector_dims: Sequence[int] = (64, 64),
        predictor_dims: Sequence[int] = (32, 64),
        activation: Activation = Activation.RELU,
        seed: int = 0,
    ) -> "Network":
        """Glorot-uniform initialized MLP; biases start at zero."""
        rng = np.random.default_rng(seed)
        layers = []
        dim = input_dim

        def add(out_dim, act, role):
            nonlocal dim
            a = np.sqrt(6.0 / (dim + out_dim))
            w = rng.uniform(-a, a, size=(out_dim, dim))
            layers.append(DenseLayer(w, np.zeros(out_dim), act, role))
            dim = out_dim

        for _ in range(backbone_layers):
            add(width, activation, Role.BACKBONE)
        for i, d in enumerate(projector_dims):
            last = i == len(projector_dims) - 1
            add(d, Activation.IDENTITY if last else activation, Role.PROJECTOR)
        for i, d in enumerate(predictor_dims):
            last = i == len(predictor_dims) - 1
            add(d, Activation.IDENTITY if last else activation, Role.PREDICTOR)
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    def indices(self, role: Role) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.role is Role(role)]

    @property
    def backbone(self) -> list[DenseLayer]:
        return [l for l in self.layers if l.role is Role.BACKBONE]

    @property
    def projector(self) -> list[DenseLayer]:
        return [l for l in self.layers if l.role is Role.PROJECTOR]

    @property
    def predictor(self) -> list[DenseLayer]:
        return [l for l in self.layers if l.role is Role.PREDICTOR]

    def stop_index(self, upto: Role | str) -> int:
        """Number of leading layers that produce the ``upto`` stage output."""
        upto = Role(upto)
        idx = self.indices(upto)
        if not idx:
            raise ValueError(f"network has no {upto.value} layers")
        return idx[-1] + 1

    def frozen_flags(self) -> list[bool]:
        return [l.frozen for l in self.layers]

    def set_frozen(self, flags: Sequence[bool]):
        for layer, flag in zip(self.layers, flags):
            layer.frozen = bool(flag)

    def unfreeze_all(self):
        for layer in self.layers:
            layer.frozen = False

    def needs_input_grad(self) -> list[bool]:
        """needs[i]: some trainable layer strictly precedes layer i."""
        needs, seen = [], False
        for layer in self.layers:
            needs.append(seen)
            seen = seen or not layer.frozen
        return needs

    def snapshot(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(l.weight.copy(), l.bias.copy()) for l in self.layers]

    def copy(self) -> "Network":
        return Network(
            [DenseLayer(l.weight.copy(), l.bias.copy(), l.activation, l.role, l.frozen) for l in self.layers]
        )

    def parameter_count(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)


def forward(net: Network, batch, upto: Role | str = Role.PREDICTOR, *, cache: bool = True) -> np.ndarray:
    """Run the chain up to the end of the ``upto`` stage.

    With ``cache`` set, inputs are retained for layers that will need them
    in backward; a frozen layer with only frozen predecessors keeps nothing.
    Stage outputs are stored in ``net.stage_outputs``.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.shape[1] != net.input_dim:
        raise ValueError(f"batch has {x.shape[1]} features, network expects {net.input_dim}")
    stop = net.stop_index(upto)
    needs = net.needs_input_grad()
    outputs: dict[Role, np.ndarray] = {}
    for i, layer in enumerate(net.layers[:stop]):
        z = x @ layer.weight.T + layer.bias
        if cache and (not layer.frozen or needs[i]):
            layer.cached_input = x
            layer.cached_preact = z
        else:
            layer.release_cache()
        x = activate(layer.activation, z)
        outputs[layer.role] = x
    for layer in net.layers[stop:]:
        layer.release_cache()
    if cache:
        net.stage_outputs = outputs
        net._last_stop = stop
    return x


def backward(
    net: Network,
    loss_grad_at_output,
    extra: dict[Role | str, np.ndarray] | None = None,
) -> GradientSet:
    """Backpropagate from the output of the last cached forward pass.

    ``extra`` injects additional gradients at the output of other stages
    (e.g. the projector output when the loss also reads ``z``).  Signals pass
    through frozen layers whenever a trainable layer lies upstream; frozen
    layers get no weight/bias gradient.
    """
    stop = net._last_stop
    if stop is None:
        raise RuntimeError("backward called without a cached forward pass")
    injections = {Role(k): np.asarray(v, dtype=np.float64) for k, v in (extra or {}).items()}
    g = np.asarray(loss_grad_at_output, dtype=np.float64)
    grads = GradientSet.zeros_like(net, batch_size=g.shape[0])
    needs = net.needs_input_grad()
    for i in range(stop - 1, -1, -1):
        layer = net.layers[i]
        last_of_role = i == stop - 1 or net.layers[i + 1].role is not layer.role
        if last_of_role and i != stop - 1 and layer.role in injections:
            g = g + injections[layer.role]
        if layer.frozen and not needs[i]:
            break
        if layer.cached_preact is None:
            raise RuntimeError(f"layer {i} has no cached forward state")
        dz = _activation_grad(layer.activation, layer.cached_preact, g)
        if not layer.frozen:
            grads.weights[i] = dz.T @ layer.cached_input
            grads.biases[i] = dz.sum(axis=0)
            grads.applied[i] = True
        if not needs[i]:
            break
        g = dz @ layer.weight
    return grads


def stopgrad(v) -> np.ndarray:
    """Same values; losses treat the result as a constant (zero gradient)."""
    return np.array(v, dtype=np.float64, copy=True).view(_Stopped)


class _Stopped(np.ndarray):
    pass


def is_stopped(v) -> bool:
    return isinstance(v, _Stopped)


def sgd_step(net: Network, grads: GradientSet, lr: float):
    for layer, gw, gb, applied in zip(net.layers, grads.weights, grads.biases, grads.applied):
        if layer.frozen or not applied:
            continue
        layer.weight = layer.weight - lr * gw
        layer.bias = layer.bias - lr * gb


Objective = Callable[[Network, tuple], tuple[float, GradientSet]]


def gradient_probe(net: Network, batches: Sequence[tuple], objective: Objective) -> GradientSet:
    """Average gradient over ``batches`` with every layer treated as trainable.

    Parameters are left untouched and freeze flags restored afterwards.
    """
    if not batches:
        raise ValueError("gradient_probe needs at least one batch")
    flags = net.frozen_flags()
    net.unfreeze_all()
    try:
        sets = [objective(net, b)[1] for b in batches]
    finally:
        net.set_frozen(flags)
    if len(sets) == 1:
        return sets[0]
    return GradientSet.mean(sets)


def save_checkpoint(net: Network, path: str | Path):
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(net.layers))]
    for layer in net.layers:
        parts.append(
            struct.pack(
                "<BIIBB",
                _ROLE_CODE[layer.role],
                layer.out_dim,
                layer.in_dim,
                _ACT_CODE[layer.activation],
                int(layer.frozen),
            )
        )
        parts.append(layer.weight.astype("<f8").tobytes(order="C"))
        parts.append(layer.bias.astype("<f8").tobytes(order="C"))
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> Network:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a PTLF checkpoint")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    roles = {v: k for k, v in _ROLE_CODE.items()}
    acts = {v: k for k, v in _ACT_CODE.items()}
    off = 12
    layers = []
    header = struct.Struct("<BIIBB")
    for _ in range(count):
        role, out_dim, in_dim, act, frozen = header.unpack_from(data, off)
        off += header.size
        nw = out_dim * in_dim
        w = np.frombuffer(data, dtype="<f8", count=nw, offset=off).reshape(out_dim, in_dim)
        off += 8 * nw
        b = np.frombuffer(data, dtype="<f8", count=out_dim, offset=off)
        off += 8 * out_dim
        layers.append(DenseLayer(w.astype(np.float64), b.astype(np.float64), acts[act], roles[role], bool(frozen)))
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes after last layer")
    return Network(layers)
