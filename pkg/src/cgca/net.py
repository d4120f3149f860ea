"""Minimal differentiable computation core.

Dense float64 arrays, a record/replay tape for reverse-mode gradients,
perceptron blocks, windowed feature gathering over sparse states, and the
two optimizers used in training.  Everything here is deliberately small:
the networks in this project are a handful of matmuls per step and the
whole point is that every gradient can be checked against central finite
differences.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    FormatError,
    NonFiniteGradientError,
    ShapeMismatchError,
    StaleTapeError,
)
from .grid import NeighborhoodSpec, SparseState, pack_coords

_CKPT_MAGIC = b"CGCA1"


class ParamStore:
    """Named, shaped float64 parameter arrays with gradient buffers."""

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}
        self._adam_m: dict[str, np.ndarray] = {}
        self._adam_v: dict[str, np.ndarray] = {}
        self.adam_t = 0
        self.version = 0

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self._values:
            raise ValueError(f"duplicate parameter name {name!r}")
        value = np.asarray(value, dtype=np.float64)
        if not np.isfinite(value).all():
            raise ValueError(f"non-finite initial value for {name!r}")
        self._values[name] = value
        self._grads[name] = np.zeros_like(value)

    def names(self) -> list[str]:
        return sorted(self._values)

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def value(self, name: str) -> np.ndarray:
        return self._values[name]

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def set_value(self, name: str, value: np.ndarray) -> None:
        """Replace a parameter in place; invalidates existing tapes."""
        self._values[name] = np.asarray(value, dtype=np.float64).reshape(
            self._values[name].shape
        )
        self.version += 1

    def zero_grads(self) -> None:
        for g in self._grads.values():
            g[...] = 0.0

    def total_parameters(self) -> int:
        return sum(v.size for v in self._values.values())

    def values_fingerprint(self) -> bytes:
        """Concatenated raw bytes of all values in name order (for tests)."""
        return b"".join(self._values[n].tobytes() for n in self.names())

    # -- checkpoint format: magic, then per entry (sorted by name):
    #    u32 name length, name bytes, u32 rank, u32 dims..., float32 data.
    #    All integers little-endian.

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(_CKPT_MAGIC)
            for name in self.names():
                v = self._values[name]
                raw = name.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
                fh.write(struct.pack("<I", v.ndim))
                fh.write(struct.pack(f"<{v.ndim}I", *v.shape))
                fh.write(v.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "ParamStore":
        store = cls()
        with open(path, "rb") as fh:
            magic = fh.read(len(_CKPT_MAGIC))
            if magic != _CKPT_MAGIC:
                raise FormatError(f"bad checkpoint magic in {path}")
            while True:
                head = fh.read(4)
                if not head:
                    break
                (nlen,) = struct.unpack("<I", head)
                name = fh.read(nlen).decode("utf-8")
                (rank,) = struct.unpack("<I", fh.read(4))
                shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
                count = int(np.prod(shape)) if rank else 1
                data = np.frombuffer(fh.read(4 * count), dtype="<f4").astype(np.float64)
                store.add(name, data.reshape(shape))
        return store


# -- optimizers ----------------------------------------------------------


def _check_finite_grads(store: ParamStore) -> None:
    for name in store.names():
        if not np.isfinite(store.grad(name)).all():
            raise NonFiniteGradientError(f"non-finite gradient in {name!r}")


def sgd_step(store: ParamStore, lr: float) -> None:
    """values <- values - lr * grads; grads zeroed afterwards."""
    _check_finite_grads(store)
    for name in store.names():
        store._values[name] -= lr * store._grads[name]
    store.zero_grads()
    store.version += 1


def adam_step(
    store: ParamStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    _check_finite_grads(store)
    store.adam_t += 1
    t = store.adam_t
    for name in store.names():
        g = store._grads[name]
        m = store._adam_m.setdefault(name, np.zeros_like(g))
        v = store._adam_v.setdefault(name, np.zeros_like(g))
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        store._values[name] -= lr * mhat / (np.sqrt(vhat) + eps)
    store.zero_grads()
    store.version += 1


# -- tape-based reverse mode ----------------------------------------------


class Node:
    """One recorded array value; parents carry vector-Jacobian closures."""

    __slots__ = ("value", "parents", "vjps", "grad")

    def __init__(self, value, parents=(), vjps=()):
        self.value = value
        self.parents = parents
        self.vjps = vjps
        self.grad = None


class Tape:
    """Records a forward computation for one backward sweep.

    Nodes are appended in creation order, which is a valid topological
    order, so backward is a single reversed pass.  Parameter leaves
    accumulate straight into the owning ParamStore's gradient buffers.
    """

    def __init__(self, store: ParamStore):
        self.store = store
        self._version = store.version
        self.nodes: list[Node] = []
        self._param_nodes: dict[str, Node] = {}

    def _record(self, value, parents=(), vjps=()) -> Node:
        node = Node(np.asarray(value, dtype=np.float64), tuple(parents), tuple(vjps))
        self.nodes.append(node)
        return node

    def param(self, name: str) -> Node:
        node = self._param_nodes.get(name)
        if node is None:
            node = self._record(self.store.value(name))
            self._param_nodes[name] = node
        return node

    def input(self, value) -> Node:
        return self._record(value)

    def constant(self, value) -> Node:
        return self._record(value)

    # -- primitive ops --

    def matmul(self, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value
        return self._record(
            av @ bv,
            (a, b),
            (lambda g: g @ bv.T, lambda g: av.T @ g),
        )

    def add(self, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value
        def back_a(g):
            return _unbroadcast(g, av.shape)
        def back_b(g):
            return _unbroadcast(g, bv.shape)
        return self._record(av + bv, (a, b), (back_a, back_b))

    def sub(self, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value
        return self._record(
            av - bv,
            (a, b),
            (lambda g: _unbroadcast(g, av.shape), lambda g: _unbroadcast(-g, bv.shape)),
        )

    def mul(self, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value
        return self._record(
            av * bv,
            (a, b),
            (
                lambda g: _unbroadcast(g * bv, av.shape),
                lambda g: _unbroadcast(g * av, bv.shape),
            ),
        )

    def scale(self, a: Node, s: float) -> Node:
        return self._record(a.value * s, (a,), (lambda g: g * s,))

    def relu(self, a: Node) -> Node:
        mask = a.value > 0
        return self._record(a.value * mask, (a,), (lambda g: g * mask,))

    def tanh(self, a: Node) -> Node:
        out = np.tanh(a.value)
        return self._record(out, (a,), (lambda g: g * (1.0 - out * out),))

    def sigmoid(self, a: Node) -> Node:
        out = 1.0 / (1.0 + np.exp(-a.value))
        return self._record(out, (a,), (lambda g: g * out * (1.0 - out),))

    def gather_rows(self, a: Node, idx: np.ndarray) -> Node:
        idx = np.asarray(idx, dtype=np.int64)
        def back(g):
            out = np.zeros_like(a.value)
            np.add.at(out, idx, g)
            return out
        return self._record(a.value[idx], (a,), (back,))

    def segment_mean(self, a: Node, seg: np.ndarray, nseg: int) -> Node:
        """Mean of rows of `a` per segment id; segments must be non-empty."""
        seg = np.asarray(seg, dtype=np.int64)
        counts = np.bincount(seg, minlength=nseg).astype(np.float64)
        sums = np.zeros((nseg, a.value.shape[1]))
        np.add.at(sums, seg, a.value)
        out = sums / counts[:, None]
        def back(g):
            return (g / counts[:, None])[seg]
        return self._record(out, (a,), (back,))

    def weighted_gather(self, a: Node, idx: np.ndarray, w: np.ndarray) -> Node:
        """out[n] = sum_j w[n, j] * a[idx[n, j]]; rows with w == 0 inert."""
        idx = np.asarray(idx, dtype=np.int64)
        w = np.asarray(w, dtype=np.float64)
        out = np.einsum("nj,njl->nl", w, a.value[idx])
        def back(g):
            grad = np.zeros_like(a.value)
            np.add.at(grad, idx.ravel(), (w[:, :, None] * g[:, None, :]).reshape(-1, a.value.shape[1]))
            return grad
        return self._record(out, (a,), (back,))

    def concat_cols(self, a: Node, b: Node) -> Node:
        na = a.value.shape[1]
        return self._record(
            np.concatenate([a.value, b.value], axis=1),
            (a, b),
            (lambda g: g[:, :na], lambda g: g[:, na:]),
        )

    # -- backward --

    def backward(self, seeds: list[tuple[Node, np.ndarray]]) -> None:
        """Accumulate gradients from one or more seeded output nodes.

        Parameter gradients land in the store; leaf `input` nodes keep
        their gradient on `.grad` for the caller.
        """
        if self.store.version != self._version:
            raise StaleTapeError("parameters changed since this tape was recorded")
        for node in self.nodes:
            node.grad = None
        for node, g in seeds:
            g = np.asarray(g, dtype=np.float64)
            if g.shape != node.value.shape:
                raise ShapeMismatchError(
                    f"seed gradient shape {g.shape} != value shape {node.value.shape}"
                )
            node.grad = g.copy() if node.grad is None else node.grad + g
        for node in reversed(self.nodes):
            if node.grad is None:
                continue
            for parent, vjp in zip(node.parents, node.vjps):
                contrib = vjp(node.grad)
                if parent.grad is None:
                    parent.grad = contrib
                else:
                    parent.grad = parent.grad + contrib
        for name, node in self._param_nodes.items():
            if node.grad is not None:
                self.store._grads[name] += node.grad


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to the broadcast-source shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- perceptron blocks -----------------------------------------------------


@dataclass(frozen=True)
class MlpSpec:
    """Layer plan for a perceptron stack.

    With residual_blocks == 0, widths = (in, h1, ..., out) builds a plain
    MLP with the activation between layers.  With residual_blocks > 0,
    widths must be (in, hidden, out): an input projection, then blocks of
    the form y = x + W2 act(W1 x + b1) + b2, then a final linear layer.
    """

    widths: tuple[int, ...]
    activation: str = "relu"
    residual_blocks: int = 0

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("need at least input and output widths")
        if any(w < 1 for w in self.widths):
            raise ValueError("widths must be positive")
        if self.activation not in ("relu", "tanh", "sigmoid", "none"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.residual_blocks < 0:
            raise ValueError("residual_blocks must be >= 0")
        if self.residual_blocks > 0 and len(self.widths) != 3:
            raise ValueError("residual stacks use widths = (in, hidden, out)")

    @property
    def in_width(self) -> int:
        return self.widths[0]

    @property
    def out_width(self) -> int:
        return self.widths[-1]


def _layer_dims(spec: MlpSpec) -> list[tuple[str, int, int]]:
    if spec.residual_blocks == 0:
        return [(f"l{i}", spec.widths[i], spec.widths[i + 1]) for i in range(len(spec.widths) - 1)]
    din, h, dout = spec.widths
    dims = [("proj", din, h)]
    for b in range(spec.residual_blocks):
        dims.append((f"res{b}a", h, h))
        dims.append((f"res{b}b", h, h))
    dims.append(("out", h, dout))
    return dims


def glorot_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def mlp_init(store: ParamStore, prefix: str, spec: MlpSpec, rng: np.random.Generator) -> None:
    for tag, din, dout in _layer_dims(spec):
        store.add(f"{prefix}.{tag}.w", glorot_init(rng, din, dout))
        store.add(f"{prefix}.{tag}.b", np.zeros(dout))


def mlp_param_names(prefix: str, spec: MlpSpec) -> list[str]:
    names = []
    for tag, _, _ in _layer_dims(spec):
        names += [f"{prefix}.{tag}.w", f"{prefix}.{tag}.b"]
    return names


def _activate(tape: Tape, spec: MlpSpec, x: Node) -> Node:
    if spec.activation == "relu":
        return tape.relu(x)
    if spec.activation == "tanh":
        return tape.tanh(x)
    if spec.activation == "sigmoid":
        return tape.sigmoid(x)
    return x


def mlp_forward(
    store: ParamStore,
    prefix: str,
    spec: MlpSpec,
    x,
    tape: Tape | None = None,
) -> tuple[Node, Tape]:
    """Run the stack on a (N, in) batch; returns the output node and tape."""
    if tape is None:
        tape = Tape(store)
    node = x if isinstance(x, Node) else tape.input(np.asarray(x, dtype=np.float64))
    if node.value.ndim != 2 or node.value.shape[1] != spec.in_width:
        raise ShapeMismatchError(
            f"input width {node.value.shape} does not match spec in_width {spec.in_width}"
        )

    def linear(tag: str, a: Node) -> Node:
        w = tape.param(f"{prefix}.{tag}.w")
        b = tape.param(f"{prefix}.{tag}.b")
        return tape.add(tape.matmul(a, w), b)

    if spec.residual_blocks == 0:
        nlayers = len(spec.widths) - 1
        for i in range(nlayers):
            node = linear(f"l{i}", node)
            if i < nlayers - 1:
                node = _activate(tape, spec, node)
        return node, tape

    node = _activate(tape, spec, linear("proj", node))
    for b in range(spec.residual_blocks):
        h = _activate(tape, spec, linear(f"res{b}a", node))
        node = tape.add(node, linear(f"res{b}b", h))
    return linear("out", node), tape


# -- windowed feature gathering ---------------------------------------------


def gather_width(window: NeighborhoodSpec, latent_dim: int, conditioned: bool = False) -> int:
    per_cell = 1 + latent_dim * (2 if conditioned else 1)
    return len(window.offsets()) * per_cell


def gather_features_batch(
    state: SparseState,
    centers: np.ndarray,
    window: NeighborhoodSpec,
    cond: SparseState | None = None,
) -> np.ndarray:
    """Fixed-length window features for a batch of center cells.

    Per offset, in the window's canonical sorted order, the block is
    [occupancy bit, state code (K)] and, when conditioning, the condition
    state's code (K) appended; absent cells contribute zeros.  With a
    condition the occupancy bit is the union of both states' bits.
    """
    centers = np.asarray(centers, dtype=np.int64).reshape(-1, 3)
    offsets = window.offsets()
    k = state.latent_dim
    per_cell = 1 + k * (2 if cond is not None else 1)
    out = np.zeros((len(centers), len(offsets) * per_cell))
    for oi, off in enumerate(offsets):
        cells = centers + off
        codes, found = state.lookup(cells)
        base = oi * per_cell
        if cond is not None:
            ccodes, cfound = cond.lookup(cells)
            out[:, base] = (found | cfound).astype(np.float64)
            out[:, base + 1 : base + 1 + k] = codes
            out[:, base + 1 + k : base + 1 + 2 * k] = ccodes
        else:
            out[:, base] = found.astype(np.float64)
            out[:, base + 1 : base + 1 + k] = codes
    return out


def gather_features(
    state: SparseState,
    center,
    window: NeighborhoodSpec,
    cond: SparseState | None = None,
) -> np.ndarray:
    """Single-center variant; returns a 1-D feature vector."""
    return gather_features_batch(state, np.asarray(center).reshape(1, 3), window, cond)[0]


# -- finite differences ------------------------------------------------------


def finite_difference_probe(
    loss_fn,
    store: ParamStore,
    rng: np.random.Generator,
    probes_per_param: int = 3,
    h: float = 1e-5,
    names: list[str] | None = None,
) -> float:
    """Max relative error between analytic grads and central differences.

    `loss_fn()` must return the scalar loss and leave analytic gradients
    accumulated in the store (starting from zeroed buffers).
    """
    store.zero_grads()
    loss_fn()
    analytic = {n: store.grad(n).copy() for n in store.names()}
    store.zero_grads()

    worst = 0.0
    for name in names if names is not None else store.names():
        v = store._values[name]
        flat = v.reshape(-1)
        n_probe = min(probes_per_param, flat.size)
        picks = rng.choice(flat.size, size=n_probe, replace=False)
        for ix in picks:
            orig = flat[ix]
            flat[ix] = orig + h
            store.version += 1
            up = float(loss_fn())
            flat[ix] = orig - h
            store.version += 1
            down = float(loss_fn())
            flat[ix] = orig
            store.version += 1
            store.zero_grads()
            fd = (up - down) / (2 * h)
            an = analytic[name].reshape(-1)[ix]
            err = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
            worst = max(worst, err)
    return worst
