"""Model architectures for single-modality and fused recurrence-risk prediction.

Neural models are described by a :class:`FusionSpec` and compiled into a
:class:`FusionGraph`: a set of named parameter shapes plus a function that
records the forward computation on a tape. Every modality is first mapped to
a 64-d representation by its encoder:

* GEN and DN: ``d -> 256 -> 64``
* PYRAD and custom modalities: ``d -> 64``

Each encoder layer is affine + ReLU followed by dropout. The final risk layer
of every model is affine without ReLU.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .exceptions import LengthMismatch, RowCountMismatch
from .nn.autodiff import Params, Tape, Tensor
from .nn.layers import AffineReluLayer, DropoutLayer, he_uniform

__all__ = [
    "ModalitySpec",
    "FusionSpec",
    "FusionGraph",
    "encoder_dims",
    "build_single_mlp",
    "build_if",
    "build_lf_mlp",
    "build_mfh",
    "build_block",
    "build_sum",
    "build_concat_mlp",
    "build_graph",
    "early_fuse",
    "late_fuse_risks",
]

DEFAULT_DIMS = {"GEN": 500, "PYRAD": 107, "DN": 1024}
ENCODER_DIM = 64
NEURAL_KINDS = ("SINGLE_MLP", "IF", "LF_MLP", "MFH", "BLOCK", "SUM", "CONCAT_MLP")
LINEAR_KINDS = ("COX", "EARLY_LINEAR", "LATE_LINEAR")


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    dim: int | None = None

    def __post_init__(self):
        if self.dim is None:
            if self.name not in DEFAULT_DIMS:
                raise ValueError(f"modality {self.name!r} has no default dimension")
            object.__setattr__(self, "dim", DEFAULT_DIMS[self.name])
        if int(self.dim) < 1:
            raise ValueError(f"modality {self.name!r} needs dim >= 1")

    def to_dict(self):
        return {"name": self.name, "dim": self.dim}


@dataclass(frozen=True)
class FusionSpec:
    """What to build: the architecture kind, its modalities and knobs.

    ``l`` is the MFH projection width; ``R``, ``b`` and ``c`` are the BLOCK
    rank, per-block input rank and per-block output chunk size.
    """

    kind: str
    modalities: tuple
    l: int = 1200  # noqa: E741
    R: int = 15
    b: int = 4
    c: int = 8
    dropout: float = 0.25

    def __post_init__(self):
        mods = tuple(m if isinstance(m, ModalitySpec) else ModalitySpec(**m) if isinstance(m, dict)
                     else ModalitySpec(m) for m in self.modalities)
        object.__setattr__(self, "modalities", mods)
        k = len(mods)
        if self.kind == "SINGLE_MLP" or self.kind == "COX":
            ok = k == 1
        elif self.kind in NEURAL_KINDS:
            ok = k == 2
        elif self.kind in ("EARLY_LINEAR", "LATE_LINEAR"):
            ok = k in (2, 3)
        else:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if not ok:
            raise ValueError(f"{self.kind} does not take {k} modalities")
        if len({m.name for m in mods}) != k:
            raise ValueError("modalities must be distinct")
        if min(self.l, self.R, self.b, self.c) < 1:
            raise ValueError("l, R, b and c must be positive")

    @property
    def is_neural(self) -> bool:
        return self.kind in NEURAL_KINDS

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "modalities": [m.to_dict() for m in self.modalities],
            "l": self.l, "R": self.R, "b": self.b, "c": self.c,
            "dropout": self.dropout,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FusionSpec":
        d = dict(d)
        d["modalities"] = tuple(d["modalities"])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class FusionGraph:
    spec: FusionSpec
    input_dims: dict
    param_shapes: dict
    fan_in: dict = field(repr=False)
    body: Callable[[Tape, dict], Tensor] = field(repr=False)
    output_dim: int = 1

    @property
    def n_params(self) -> int:
        return int(sum(np.prod(s) for s in self.param_shapes.values()))

    @property
    def decayed(self) -> frozenset:
        return frozenset(n for n in self.param_shapes if not n.endswith(".bias"))

    def init_params(self, rng: np.random.Generator | int = 0) -> Params:
        """He-style uniform weights scaled by fan-in; zero biases."""
        rng = np.random.default_rng(rng)
        arrays = {}
        for name, shape in self.param_shapes.items():
            if name.endswith(".bias"):
                arrays[name] = np.zeros(shape)
            else:
                arrays[name] = he_uniform(rng, shape, self.fan_in[name])
        return Params(arrays, self.decayed)

    def zero_params(self) -> Params:
        return Params({n: np.zeros(s) for n, s in self.param_shapes.items()}, self.decayed)

    def spec_hash(self) -> str:
        payload = json.dumps(
            {"spec": self.spec.to_dict(), "shapes": {k: list(v) for k, v in self.param_shapes.items()}},
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()


class _Builder:
    def __init__(self):
        self.shapes: dict = {}
        self.fan_in: dict = {}

    def dense(self, name, d_in, d_out, relu=True) -> AffineReluLayer:
        layer = AffineReluLayer(name, d_in, d_out, relu)
        self.shapes.update(layer.param_shapes)
        self.fan_in[f"{name}.weight"] = d_in
        return layer

    def tensor(self, name, shape, fan_in):
        self.shapes[name] = tuple(shape)
        self.fan_in[name] = fan_in
        return name


def encoder_dims(modality: ModalitySpec) -> list[int]:
    if modality.name in ("GEN", "DN"):
        return [modality.dim, 256, ENCODER_DIM]
    return [modality.dim, ENCODER_DIM]


def _encoder(b: _Builder, modality: ModalitySpec, dropout: float):
    dims = encoder_dims(modality)
    layers = [b.dense(f"enc_{modality.name}.{i}", dims[i], dims[i + 1]) for i in range(len(dims) - 1)]
    drop = DropoutLayer(dropout)

    def run(tape, x):
        for layer in layers:
            x = drop(tape, layer(tape, x))
        return x

    return run


def _graph(spec, b, body):
    dims = {m.name: m.dim for m in spec.modalities}
    return FusionGraph(spec, dims, dict(b.shapes), dict(b.fan_in), body)


def build_single_mlp(modality: ModalitySpec, dropout: float = 0.25) -> FusionGraph:
    """Encoder followed by a linear scalar risk head."""
    spec = FusionSpec("SINGLE_MLP", (modality,), dropout=dropout)
    b = _Builder()
    enc = _encoder(b, spec.modalities[0], dropout)
    head = b.dense("head", ENCODER_DIM, 1, relu=False)
    name = spec.modalities[0].name
    return _graph(spec, b, lambda tape, x: head(tape, enc(tape, x[name])))


def _pair(kind, x, y, dropout, **kw):
    spec = FusionSpec(kind, (x, y), dropout=dropout, **kw)
    b = _Builder()
    mx, my = spec.modalities
    return spec, b, _encoder(b, mx, dropout), _encoder(b, my, dropout), mx.name, my.name


def build_if(x: ModalitySpec, y: ModalitySpec, dropout: float = 0.25, kind: str = "IF") -> FusionGraph:
    """Intermediate fusion: concatenated encodings -> 128:64 -> 64:1."""
    spec, b, enc_x, enc_y, nx, ny = _pair(kind, x, y, dropout)
    fuse = b.dense("fuse", 2 * ENCODER_DIM, ENCODER_DIM)
    head = b.dense("head", ENCODER_DIM, 1, relu=False)

    def body(tape, inputs):
        h = tape.concat([enc_x(tape, inputs[nx]), enc_y(tape, inputs[ny])])
        return head(tape, fuse(tape, h))

    return _graph(spec, b, body)


def build_concat_mlp(x: ModalitySpec, y: ModalitySpec, dropout: float = 0.25) -> FusionGraph:
    """Concatenation + fully connected fusion; the same structure as :func:`build_if`."""
    return build_if(x, y, dropout, kind="CONCAT_MLP")


def build_sum(x: ModalitySpec, y: ModalitySpec, dropout: float = 0.25) -> FusionGraph:
    spec, b, enc_x, enc_y, nx, ny = _pair("SUM", x, y, dropout)
    fuse = b.dense("fuse", ENCODER_DIM, ENCODER_DIM)
    head = b.dense("head", ENCODER_DIM, 1, relu=False)

    def body(tape, inputs):
        return head(tape, fuse(tape, tape.add(enc_x(tape, inputs[nx]), enc_y(tape, inputs[ny]))))

    return _graph(spec, b, body)


def build_lf_mlp(x: ModalitySpec, y: ModalitySpec, dropout: float = 0.25) -> FusionGraph:
    """Late fusion: one linear scalar head per modality, combined by a 2:1 layer."""
    spec, b, enc_x, enc_y, nx, ny = _pair("LF_MLP", x, y, dropout)
    head_x = b.dense(f"head_{nx}", ENCODER_DIM, 1, relu=False)
    head_y = b.dense(f"head_{ny}", ENCODER_DIM, 1, relu=False)
    combine = b.dense("combine", 2, 1, relu=False)

    def body(tape, inputs):
        rx = head_x(tape, enc_x(tape, inputs[nx]))
        ry = head_y(tape, enc_y(tape, inputs[ny]))
        return combine(tape, tape.concat([rx, ry]))

    return _graph(spec, b, body)


def build_mfh(x: ModalitySpec, y: ModalitySpec, l: int = 1200, dropout: float = 0.25) -> FusionGraph:  # noqa: E741
    """Factorized high-order pooling of the two encodings.

    ``z0 = P1(hx) * P2(hy)``, ``z1 = P3(hx) * P4(hy)`` with 64:l projections,
    then ``[z0, z0 * z1]`` (width 2l) -> 2l:64 -> 64:1.
    """
    spec, b, enc_x, enc_y, nx, ny = _pair("MFH", x, y, dropout, l=l)
    proj = [b.dense(f"mfh.proj{i}", ENCODER_DIM, l) for i in range(1, 5)]
    fuse = b.dense("fuse", 2 * l, ENCODER_DIM)
    head = b.dense("head", ENCODER_DIM, 1, relu=False)

    def body(tape, inputs):
        hx = enc_x(tape, inputs[nx])
        hy = enc_y(tape, inputs[ny])
        z0 = tape.mul(proj[0](tape, hx), proj[1](tape, hy))
        z1 = tape.mul(proj[2](tape, hx), proj[3](tape, hy))
        return head(tape, fuse(tape, tape.concat([z0, tape.mul(z0, z1)])))

    return _graph(spec, b, body)


def build_block(
    x: ModalitySpec, y: ModalitySpec, R: int = 15, b: int = 4, c: int = 8, dropout: float = 0.25
) -> FusionGraph:
    """Block-term bilinear fusion of the two encodings.

    Block ``r`` projects ``hx`` and ``hy`` to rank ``b`` with ``X_r`` and
    ``Y_r`` (64 x b), contracts both with the core ``D_r`` (b x b x c), and maps
    the resulting c-vector back to 64-d with ``T_r`` (64 x c). The fused
    vector is ``ReLU(sum_r T_r z_r)``, followed by a linear 64:1 head.

    Cores and output factors are initialized with fan-ins ``4 b^2`` and
    ``R c`` so the fused vector starts with O(1) scale.
    """
    spec, bld, enc_x, enc_y, nx, ny = _pair("BLOCK", x, y, dropout, R=R, b=b, c=c)
    d = ENCODER_DIM
    Xn = bld.tensor("block.X", (R, d, b), d)
    Yn = bld.tensor("block.Y", (R, d, b), d)
    Dn = bld.tensor("block.D", (R, b, b, c), 4 * b * b)
    Tn = bld.tensor("block.T", (R, d, c), R * c)
    head = bld.dense("head", d, 1, relu=False)

    def body(tape, inputs):
        hx = enc_x(tape, inputs[nx])
        hy = enc_y(tape, inputs[ny])
        px = tape.einsum("ni,rip->nrp", hx, tape.param(Xn))
        py = tape.einsum("ni,riq->nrq", hy, tape.param(Yn))
        z = tape.einsum("nrp,nrq,rpqk->nrk", px, py, tape.param(Dn))
        fused = tape.relu(tape.einsum("nrk,rjk->nj", z, tape.param(Tn)))
        return head(tape, fused)

    return _graph(spec, bld, body)


def build_graph(spec: FusionSpec) -> FusionGraph:
    m = spec.modalities
    if spec.kind == "SINGLE_MLP":
        return build_single_mlp(m[0], spec.dropout)
    if spec.kind == "IF":
        return build_if(m[0], m[1], spec.dropout)
    if spec.kind == "CONCAT_MLP":
        return build_concat_mlp(m[0], m[1], spec.dropout)
    if spec.kind == "SUM":
        return build_sum(m[0], m[1], spec.dropout)
    if spec.kind == "LF_MLP":
        return build_lf_mlp(m[0], m[1], spec.dropout)
    if spec.kind == "MFH":
        return build_mfh(m[0], m[1], spec.l, spec.dropout)
    if spec.kind == "BLOCK":
        return build_block(m[0], m[1], spec.R, spec.b, spec.c, spec.dropout)
    raise ValueError(f"{spec.kind} is not a neural architecture")


def early_fuse(features: Sequence[np.ndarray] | Mapping[str, np.ndarray]):
    """Column-wise concatenation of per-modality feature matrices.

    Returns the fused matrix and ``{name: slice}`` giving each modality's
    columns (names default to the list position).
    """
    items = list(features.items()) if isinstance(features, Mapping) else list(enumerate(features))
    if not items:
        raise ValueError("nothing to fuse")
    mats = [np.asarray(m, dtype=np.float64) for _, m in items]
    rows = {m.shape[0] for m in mats}
    if len(rows) != 1:
        raise RowCountMismatch(f"row counts differ: {sorted(rows)}")
    provenance, start = {}, 0
    for (name, _), m in zip(items, mats):
        provenance[name] = slice(start, start + m.shape[1])
        start += m.shape[1]
    return np.concatenate(mats, axis=1), provenance


def rank_standardize(risk) -> np.ndarray:
    """Average ranks mapped to [0, 1]; a single patient maps to 0.5."""
    risk = np.asarray(risk, dtype=np.float64).ravel()
    if risk.size == 1:
        return np.array([0.5])
    return (rankdata(risk) - 1.0) / (risk.size - 1.0)


def late_fuse_risks(risks: Sequence, weights: Sequence[float] | None = None) -> np.ndarray:
    """Weighted mean of rank-standardized risk vectors (equal weights by default)."""
    if not risks:
        raise ValueError("nothing to fuse")
    sizes = {np.size(r) for r in risks}
    if len(sizes) != 1:
        raise LengthMismatch(f"risk vectors differ in length: {sorted(sizes)}")
    w = np.ones(len(risks)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.size != len(risks) or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be nonnegative, one per risk vector, not all zero")
    ranked = np.stack([rank_standardize(r) for r in risks])
    return (w / w.sum()) @ ranked
