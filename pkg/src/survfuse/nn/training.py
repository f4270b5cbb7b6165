"""Forward passes, SGD training with early stopping, and gradient checking."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from ..exceptions import AllRunsDiscarded, ShapeMismatch
from ..survival import SurvivalDataset, concordance_index
from .autodiff import EVAL, TRAIN, Params, Tape, Tensor, backward
from .losses import make_loss

logger = logging.getLogger(__name__)

__all__ = [
    "forward",
    "sgd_step",
    "Split",
    "TrainConfig",
    "TrainOutcome",
    "RunRecord",
    "train",
    "train_run",
    "predict",
    "finite_difference_check",
    "gradient_check_report",
]


def forward(graph, params: Params, inputs: Mapping[str, np.ndarray], mode: str = EVAL,
            rng: np.random.Generator | None = None) -> tuple[Tensor, Tape]:
    """Run ``graph`` on a batch; returns the (N, 1) risk tensor and its tape."""
    tape = Tape(params, mode, rng)
    nodes, rows = {}, set()
    for name, dim in graph.input_dims.items():
        if name not in inputs:
            raise ShapeMismatch(f"missing input for modality {name!r}")
        arr = np.asarray(inputs[name], dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != dim:
            raise ShapeMismatch(f"modality {name!r} expects (N, {dim}), got {arr.shape}")
        rows.add(arr.shape[0])
        nodes[name] = tape.constant(arr, name)
    if len(rows) != 1:
        raise ShapeMismatch(f"modalities disagree on batch size: {sorted(rows)}")
    return graph.body(tape, nodes), tape


def predict(graph, params: Params, inputs) -> np.ndarray:
    out, _ = forward(graph, params, inputs, EVAL)
    return out.value[:, 0].copy()


def sgd_step(params: Params, gradients: Mapping[str, np.ndarray], learning_rate: float,
             weight_decay: float = 0.0) -> None:
    """In-place ``theta <- theta - lr * (g + weight_decay * theta)``; biases are not decayed."""
    for name, array in params.arrays.items():
        g = np.asarray(gradients[name], dtype=np.float64)
        if g.shape != array.shape:
            raise ShapeMismatch(f"gradient for {name!r} has shape {g.shape}, expected {array.shape}")
        if weight_decay and name in params.decayed:
            array -= learning_rate * (g + weight_decay * array)
        else:
            array -= learning_rate * g
    params.version += 1


@dataclass(frozen=True)
class Split:
    inputs: dict
    survival: SurvivalDataset


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    weight_decay_grid: tuple = (0.0, 1e-4, 1e-3, 1e-2)
    max_epochs: int = 5000
    patience: int = 50
    min_steps: int = 1000
    n_inits: int = 3
    seed: int = 0
    # "mean" divides the loss by its number of pairs (ranking) or events (Cox)
    loss_reduction: str = "mean"

    def __post_init__(self):
        object.__setattr__(self, "weight_decay_grid", tuple(float(w) for w in self.weight_decay_grid))
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not self.weight_decay_grid or any(w < 0 for w in self.weight_decay_grid):
            raise ValueError("weight_decay_grid must be nonempty and nonnegative")
        if self.max_epochs < 0 or self.patience < 1 or self.min_steps < 1 or self.n_inits < 1:
            raise ValueError("max_epochs >= 0; patience, min_steps and n_inits >= 1")
        if self.loss_reduction not in ("mean", "sum"):
            raise ValueError("loss_reduction must be 'mean' or 'sum'")


@dataclass(frozen=True)
class RunRecord:
    weight_decay: float
    init_index: int
    best_val_cindex: float
    steps_taken: int
    discarded: bool


@dataclass
class TrainOutcome:
    params: Params
    best_val_cindex: float
    steps_taken: int
    discarded: bool
    history: list = field(default_factory=list)
    weight_decay: float = 0.0
    init_index: int = 0
    runs: list = field(default_factory=list)

    @property
    def n_discarded(self) -> int:
        return sum(r.discarded for r in self.runs)


def _val_cindex(graph, params, split: Split) -> float:
    return concordance_index(split.survival, predict(graph, params, split.inputs)).c_index


def train_run(graph, train_split: Split, val_split: Split, loss_kind: str, config: TrainConfig,
              weight_decay: float = 0.0, init_index: int = 0, params: Params | None = None) -> TrainOutcome:
    """One training run from one initialization.

    Full-batch gradient steps (one per epoch). After every step the
    validation C-index is computed; the run stops after ``patience`` epochs
    without strict improvement and returns the best-validation snapshot. A
    run that took fewer than ``min_steps`` steps is marked discarded.
    """
    init_rng, drop_rng = (np.random.default_rng(s) for s in
                          np.random.SeedSequence([config.seed, init_index]).spawn(2))
    if params is None:
        params = graph.init_params(init_rng)
    loss_fn = make_loss(loss_kind, train_split.survival)
    norm = loss_fn.n_terms if config.loss_reduction == "mean" else 1.0

    best = params.copy()
    best_c = _val_cindex(graph, params, val_split)
    history = []
    steps = since_best = 0
    for _ in range(config.max_epochs):
        out, tape = forward(graph, params, train_split.inputs, TRAIN, drop_rng)
        loss, g = loss_fn(out.value[:, 0])
        if not np.isfinite(loss):
            logger.warning("non-finite training loss after %d steps; stopping run", steps)
            break
        grads = backward(tape, out, g[:, None] / norm)
        sgd_step(params, grads, config.learning_rate, weight_decay)
        steps += 1
        val_c = _val_cindex(graph, params, val_split)
        history.append((loss / norm, val_c))
        if val_c > best_c:
            best, best_c, since_best = params.copy(), val_c, 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    return TrainOutcome(best, best_c, steps, steps < config.min_steps, history, weight_decay, init_index)


def train(graph, splits: Mapping[str, Split], loss_kind: str = "RANKING",
          config: TrainConfig = TrainConfig()) -> TrainOutcome:
    """Grid over weight decays and seeded initializations; keep the best kept run.

    Discarded runs never win. The winner is the kept run with the highest
    best-validation C-index (earliest in grid order on ties).

    Raises
    ------
    AllRunsDiscarded
        If every run stopped before ``config.min_steps`` steps.
    """
    winner, runs = None, []
    for wd in config.weight_decay_grid:
        for k in range(config.n_inits):
            out = train_run(graph, splits["train"], splits["validation"], loss_kind, config, wd, k)
            runs.append(RunRecord(wd, k, out.best_val_cindex, out.steps_taken, out.discarded))
            logger.debug("wd=%g init=%d val_c=%.4f steps=%d discarded=%s",
                         wd, k, out.best_val_cindex, out.steps_taken, out.discarded)
            if not out.discarded and (winner is None or out.best_val_cindex > winner.best_val_cindex):
                winner = out
    if winner is None:
        raise AllRunsDiscarded(f"all {len(runs)} runs stopped before {config.min_steps} steps")
    winner.runs = runs
    return winner


@dataclass(frozen=True)
class GradCheckReport:
    max_relative_error: float
    n_checked: int
    n_skipped: int
    worst_parameter: str | None


def gradient_check_report(graph, params: Params, inputs, dataset: SurvivalDataset,
                          loss_kind: str | Callable = "RANKING", n_samples: int = 100,
                          h: float = 1e-2, seed: int = 0, mode: str = EVAL,
                          precision: str = "double", stencil: int = 4,
                          corrupt: float = 0.0) -> GradCheckReport:
    """Compare float64 backprop gradients with central differences on sampled entries.

    By default the numeric side is the fourth-order central stencil
    ``(f(-2h) - 8 f(-h) + 8 f(h) - f(2h)) / 12h`` (``stencil=2`` gives the
    plain two-point one). Its truncation error is O(h^4), so a fairly large
    ``h`` is affordable; the dominant error is loss roundoff of order
    ``ulp(loss) / h``, which matters for entries whose gradient is near the
    1e-8 floor of the error metric. ``precision="extended"`` evaluates the
    perturbed passes in ``np.longdouble`` (slow: no BLAS).

    Dropout masks are frozen by replaying the same random stream for every
    forward pass. Entries whose perturbation flips any ReLU on or off sit on
    a kink and are skipped. ``corrupt`` scales the analytic gradient by
    ``1 + corrupt`` (a negative control for test harnesses).
    """
    if precision not in ("extended", "double"):
        raise ValueError(f"unknown precision {precision!r}")
    loss_fn = loss_kind if callable(loss_kind) else make_loss(loss_kind, dataset)

    def run(p):
        out, tape = forward(graph, p, inputs, mode, np.random.default_rng(seed))
        return out, tape, loss_fn(out.value[:, 0])

    out, tape, (_, g) = run(params)
    analytic = backward(tape, out, g[:, None])

    probe = params.astype(np.longdouble) if precision == "extended" else params.copy()
    base_masks = run(probe)[1].relu_masks
    if stencil == 4:
        offsets, weights, denom = (-2, -1, 1, 2), (1, -8, 8, -1), 12 * h
    elif stencil == 2:
        offsets, weights, denom = (-1, 1), (-1, 1), 2 * h
    else:
        raise ValueError("stencil must be 2 or 4")

    entries = [(name, i) for name in params for i in range(params[name].size)]
    order = np.random.default_rng(seed).permutation(len(entries))
    worst, worst_name, checked, skipped = 0.0, None, 0, 0
    for pos in order:
        if checked >= n_samples:
            break
        name, i = entries[pos]
        flat = probe[name].reshape(-1)
        original = flat[i]
        total, kink = 0.0, False
        for k, w in zip(offsets, weights):
            flat[i] = original + k * h
            _, t, (loss, _) = run(probe)
            kink |= any(not np.array_equal(a, b) for a, b in zip(base_masks, t.relu_masks))
            total += w * loss
        flat[i] = original
        if kink:
            skipped += 1
            continue
        numeric = float(total / denom)
        a = float(analytic[name].reshape(-1)[i]) * (1.0 + corrupt)
        err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        checked += 1
        if err > worst:
            worst, worst_name = err, name
    return GradCheckReport(float(worst), checked, skipped, worst_name)


def finite_difference_check(graph, params: Params, inputs, dataset: SurvivalDataset,
                            loss_kind: str | Callable = "RANKING", n_samples: int = 100,
                            h: float = 1e-2, seed: int = 0, mode: str = EVAL,
                            precision: str = "double", stencil: int = 4) -> float:
    """Max relative error ``|a - n| / max(1e-8, |a| + |n|)`` over sampled parameters."""
    return gradient_check_report(graph, params, inputs, dataset, loss_kind, n_samples, h, seed,
                                 mode, precision, stencil).max_relative_error


__all__ += ["GradCheckReport", "TRAIN", "EVAL"]
