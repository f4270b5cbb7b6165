"""A small reverse-mode differentiation engine over dense numpy arrays.

Every operation executed during a forward pass is recorded on a
:class:`Tape`; :func:`backward` walks the tape in reverse and returns the
gradient of every named parameter. Only the operations needed by the fusion
architectures are provided.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from ..exceptions import ShapeMismatch, StaleTape

__all__ = ["Tensor", "Tape", "Params", "backward"]

TRAIN = "TRAIN"
EVAL = "EVAL"


class Tensor:
    """A value on the tape together with how to push gradients to its parents."""

    __slots__ = ("value", "parents", "grad_fn", "name", "index")

    def __init__(self, value, parents=(), grad_fn=None, name=None, index=-1):
        self.value = value
        self.parents = parents
        self.grad_fn = grad_fn
        self.name = name
        self.index = index

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"


class Params:
    """Named parameter arrays plus which of them receive weight decay.

    ``version`` is bumped by every in-place update so stale tapes can be
    detected.
    """

    def __init__(self, arrays: dict, decayed: Sequence[str] = (), dtype=np.float64):
        self.arrays = {k: np.array(v, dtype=dtype) for k, v in arrays.items()}
        self.decayed = frozenset(decayed)
        self.dtype = np.dtype(dtype)
        self.version = 0

    def copy(self) -> "Params":
        out = Params(self.arrays, self.decayed, self.dtype)
        out.version = self.version
        return out

    def astype(self, dtype) -> "Params":
        return Params(self.arrays, self.decayed, dtype)

    def __getitem__(self, name):
        return self.arrays[name]

    def __iter__(self):
        return iter(self.arrays)

    def __len__(self):
        return len(self.arrays)

    def n_values(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def equals(self, other: "Params") -> bool:
        return self.arrays.keys() == other.arrays.keys() and all(
            np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays
        )


class Tape:
    """Records a forward pass. Create one per forward call."""

    def __init__(self, params: Params, mode: str = EVAL, rng: np.random.Generator | None = None):
        if mode not in (TRAIN, EVAL):
            raise ValueError(f"unknown mode {mode!r}")
        self.params = params
        self.version = params.version
        self.mode = mode
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.nodes: list[Tensor] = []
        self.param_nodes: dict[str, Tensor] = {}
        self.relu_masks: list[np.ndarray] = []

    def _record(self, value, parents=(), grad_fn=None, name=None) -> Tensor:
        node = Tensor(value, tuple(parents), grad_fn, name, len(self.nodes))
        self.nodes.append(node)
        return node

    def constant(self, value, name=None) -> Tensor:
        return self._record(np.asarray(value, dtype=self.params.dtype), name=name)

    def param(self, name: str) -> Tensor:
        if name not in self.param_nodes:
            self.param_nodes[name] = self._record(self.params[name], name=name)
        return self.param_nodes[name]

    # operations -----------------------------------------------------------

    def affine(self, x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
        """``x @ weight.T + bias`` for a batch ``x`` of shape (N, d_in)."""
        if x.shape[-1] != weight.shape[1] or bias.shape != (weight.shape[0],):
            raise ShapeMismatch(f"affine: input {x.shape}, weight {weight.shape}, bias {bias.shape}")

        def grad_fn(g):
            return g @ weight.value, g.T @ x.value, g.sum(axis=0)

        return self._record(x.value @ weight.value.T + bias.value, (x, weight, bias), grad_fn)

    def relu(self, x: Tensor) -> Tensor:
        mask = x.value > 0
        self.relu_masks.append(mask)
        return self._record(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))

    def dropout(self, x: Tensor, p: float) -> Tensor:
        """Inverted dropout; the identity in EVAL mode or when ``p == 0``."""
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
        if self.mode == EVAL or p == 0.0:
            return x
        scale = (self.rng.random(x.shape) >= p) / (1.0 - p)
        return self._record(x.value * scale, (x,), lambda g: (g * scale,))

    def concat(self, xs: Sequence[Tensor]) -> Tensor:
        sizes = [x.shape[1] for x in xs]
        cuts = np.cumsum(sizes)[:-1]

        def grad_fn(g):
            return tuple(np.split(g, cuts, axis=1))

        return self._record(np.concatenate([x.value for x in xs], axis=1), xs, grad_fn)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ShapeMismatch(f"add: {a.shape} vs {b.shape}")
        return self._record(a.value + b.value, (a, b), lambda g: (g, g))

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        """Elementwise product of equally shaped tensors."""
        if a.shape != b.shape:
            raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}")
        return self._record(a.value * b.value, (a, b), lambda g: (g * b.value, g * a.value))

    def einsum(self, subscripts: str, *operands: Tensor) -> Tensor:
        """Tensor contraction in ``numpy.einsum`` notation (explicit output only).

        Each operand's gradient is the contraction of the upstream gradient
        with the remaining operands, so no operand may repeat an index.
        """
        inputs, out = subscripts.replace(" ", "").split("->")
        in_subs = inputs.split(",")
        if len(in_subs) != len(operands):
            raise ShapeMismatch(f"einsum {subscripts!r} got {len(operands)} operands")
        for s, op in zip(in_subs, operands):
            if len(s) != op.value.ndim or len(set(s)) != len(s):
                raise ShapeMismatch(f"einsum operand {s!r} does not fit shape {op.shape}")
        values = [op.value for op in operands]

        def grad_fn(g):
            grads = []
            for k, s in enumerate(in_subs):
                others = [v for i, v in enumerate(values) if i != k]
                other_subs = [t for i, t in enumerate(in_subs) if i != k]
                spec = ",".join([out] + other_subs) + "->" + s
                grads.append(np.einsum(spec, g, *others, optimize=True))
            return tuple(grads)

        value = np.einsum(subscripts, *values, optimize=True)
        return self._record(value, operands, grad_fn)


def backward(tape: Tape, output: Tensor, output_gradient) -> dict[str, np.ndarray]:
    """Gradients of ``sum(output * output_gradient)`` for every parameter.

    Parameters that did not take part in the forward pass get zero gradients.

    Raises
    ------
    StaleTape
        If the parameters were modified after the tape was recorded.
    """
    if tape.params.version != tape.version:
        raise StaleTape("parameters changed since this tape was recorded; run forward again")
    g_out = np.broadcast_to(np.asarray(output_gradient, dtype=tape.params.dtype), output.shape)
    grads: dict[int, np.ndarray] = {output.index: np.array(g_out)}
    for node in reversed(tape.nodes[: output.index + 1]):
        g = grads.pop(node.index, None)
        if g is None or node.grad_fn is None:
            if g is not None:
                grads[node.index] = g  # leaf: keep for collection below
            continue
        for parent, pg in zip(node.parents, node.grad_fn(g)):
            if parent.index in grads:
                grads[parent.index] = grads[parent.index] + pg
            else:
                grads[parent.index] = pg
    out = {}
    for name, array in tape.params.arrays.items():
        node = tape.param_nodes.get(name)
        g = grads.get(node.index) if node is not None else None
        out[name] = np.zeros_like(array) if g is None else np.asarray(g, dtype=array.dtype).reshape(array.shape)
    return out

