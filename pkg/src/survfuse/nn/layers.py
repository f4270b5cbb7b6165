from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor


@dataclass(frozen=True)
class AffineReluLayer:
    """Fully connected layer ``d_in -> d_out``, optionally followed by ReLU.

    Parameters are looked up on the tape as ``<name>.weight`` (d_out x d_in)
    and ``<name>.bias`` (d_out,).
    """

    name: str
    d_in: int
    d_out: int
    apply_relu: bool = True

    @property
    def param_shapes(self) -> dict:
        return {f"{self.name}.weight": (self.d_out, self.d_in), f"{self.name}.bias": (self.d_out,)}

    @property
    def n_params(self) -> int:
        return self.d_out * self.d_in + self.d_out

    def __call__(self, tape: Tape, x: Tensor) -> Tensor:
        out = tape.affine(x, tape.param(f"{self.name}.weight"), tape.param(f"{self.name}.bias"))
        return tape.relu(out) if self.apply_relu else out


@dataclass(frozen=True)
class DropoutLayer:
    p: float = 0.25

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise ValueError(f"dropout probability must lie in [0, 1), got {self.p}")

    def __call__(self, tape: Tape, x: Tensor) -> Tensor:
        return tape.dropout(x, self.p)


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)
