"""Cohort files, feature preprocessing, stratified splits and synthetic cohorts.

File formats
------------
Feature files are comma-separated with a header row; the first column holds
the patient id and the remaining columns the features. The labels file has
the columns ``patient_id,event,time`` with ``event`` in {0, 1} and ``time``
a positive number of days. :func:`save_cohort` writes one feature file per
modality, ``labels.csv`` and ``manifest.json`` (modalities, dims and a
SHA-256 over the data files). Floats are written with ``repr`` so a save and
load round trip is exact.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .exceptions import EmptyIntersection, KTooLarge, ParseError, RowCountMismatch, StratumTooSmall
from .survival import SurvivalDataset

logger = logging.getLogger(__name__)

__all__ = [
    "Cohort",
    "load_cohort",
    "load_cohort_dir",
    "save_cohort",
    "select_top_variant",
    "normalize",
    "apply_normalization",
    "preprocess",
    "SplitPlan",
    "stratified_splits",
    "SyntheticConfig",
    "generate_synthetic",
    "MINMAX01",
    "ZSCORE",
]

MINMAX01 = "MINMAX01"
ZSCORE = "ZSCORE"


@dataclass(frozen=True, eq=False)
class Cohort:
    """Patients with aligned feature matrices and survival labels."""

    patient_ids: tuple
    modalities: dict
    survival: SurvivalDataset
    feature_names: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = tuple(str(p) for p in self.patient_ids)
        if len(set(ids)) != len(ids):
            raise ValueError("patient ids must be unique")
        mods = {k: np.asarray(v, dtype=np.float64) for k, v in self.modalities.items()}
        for name, X in mods.items():
            if X.ndim != 2 or X.shape[0] != len(ids):
                raise RowCountMismatch(f"modality {name!r} has shape {X.shape} for {len(ids)} patients")
        if len(self.survival) != len(ids):
            raise RowCountMismatch(f"{len(self.survival)} survival records for {len(ids)} patients")
        names = {k: list(self.feature_names.get(k) or [f"{k}_{j}" for j in range(X.shape[1])])
                 for k, X in mods.items()}
        object.__setattr__(self, "patient_ids", ids)
        object.__setattr__(self, "modalities", mods)
        object.__setattr__(self, "feature_names", names)

    def __len__(self) -> int:
        return len(self.patient_ids)

    @property
    def dims(self) -> dict:
        return {k: X.shape[1] for k, X in self.modalities.items()}

    def __eq__(self, other):
        if not isinstance(other, Cohort):
            return NotImplemented
        return (self.patient_ids == other.patient_ids
                and self.modalities.keys() == other.modalities.keys()
                and all(np.array_equal(X, other.modalities[k]) for k, X in self.modalities.items())
                and self.feature_names == other.feature_names
                and self.survival == other.survival)


# ---------------------------------------------------------------- file IO


def _read_table(path):
    """Rows of a CSV file keyed by patient id: ``(header, {id: (line, values)})``."""
    path = Path(path)
    rows = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or len(header) < 2:
            raise ParseError(path, 1, "missing header (need an id column and at least one more)")
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(path, line, f"expected {len(header)} fields, found {len(row)}")
            pid = row[0].strip()
            if not pid:
                raise ParseError(path, line, "empty patient id")
            if pid in rows:
                raise ParseError(path, line, f"duplicate patient id {pid!r}")
            rows[pid] = (line, row[1:])
    return header, rows


def _float(path, line, text):
    try:
        value = float(text)
    except ValueError:
        raise ParseError(path, line, f"not a number: {text!r}") from None
    if not math.isfinite(value):
        raise ParseError(path, line, f"non-finite value {text!r}")
    return value


def _read_labels(path):
    header, rows = _read_table(path)
    if [h.strip() for h in header] != ["patient_id", "event", "time"]:
        raise ParseError(path, 1, f"labels header must be patient_id,event,time; got {','.join(header)}")
    labels = {}
    for pid, (line, (event, time)) in rows.items():
        if event.strip() not in ("0", "1"):
            raise ParseError(path, line, f"event must be 0 or 1, got {event!r}")
        t = _float(path, line, time)
        if t <= 0:
            raise ParseError(path, line, f"time must be positive, got {time!r}")
        labels[pid] = (event.strip() == "1", t)
    return labels


def load_cohort(feature_files: Mapping[str, str | Path], labels_file) -> Cohort:
    """Inner-join feature tables and labels on patient id.

    Patients are kept in labels-file order. Patients missing from any file
    are dropped and the count is logged.

    Raises
    ------
    ParseError
        Malformed rows, non-numeric values or duplicate ids (with file and line).
    EmptyIntersection
        No patient appears in every file.
    """
    labels = _read_labels(labels_file)
    tables = {}
    for name, path in feature_files.items():
        header, rows = _read_table(path)
        values = {pid: [_float(path, line, v) for v in vals] for pid, (line, vals) in rows.items()}
        tables[name] = (header[1:], values)
    keep = [pid for pid in labels if all(pid in t[1] for t in tables.values())]
    all_ids = set(labels).union(*(t[1].keys() for t in tables.values()))
    if len(all_ids) > len(keep):
        logger.info("dropped %d patient(s) missing a modality or label", len(all_ids) - len(keep))
    if not keep:
        raise EmptyIntersection("no patient has every modality and a label")
    mods = {name: np.array([vals[pid] for pid in keep], dtype=np.float64).reshape(len(keep), len(cols))
            for name, (cols, vals) in tables.items()}
    names = {name: cols for name, (cols, _) in tables.items()}
    surv = SurvivalDataset([labels[p][0] for p in keep], [labels[p][1] for p in keep])
    return Cohort(tuple(keep), mods, surv, names)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def save_cohort(cohort: Cohort, out_dir) -> Path:
    """Write ``<modality>.csv``, ``labels.csv`` and ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, X in cohort.modalities.items():
        fname = f"{name}.csv"
        _write_csv(out / fname, ["patient_id", *cohort.feature_names[name]],
                   ([pid, *map(repr, map(float, row))] for pid, row in zip(cohort.patient_ids, X)))
        files[name] = fname
    _write_csv(out / "labels.csv", ["patient_id", "event", "time"],
               ([pid, int(e), repr(float(t))] for pid, e, t in
                zip(cohort.patient_ids, cohort.survival.event, cohort.survival.time)))
    digest = hashlib.sha256()
    for fname in [*files.values(), "labels.csv"]:
        digest.update((out / fname).read_bytes())
    manifest = {
        "modalities": [{"name": n, "file": f, "dim": cohort.dims[n]} for n, f in files.items()],
        "labels": "labels.csv",
        "n_patients": len(cohort),
        "content_sha256": digest.hexdigest(),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_cohort_dir(directory) -> Cohort:
    """Load a cohort written by :func:`save_cohort` (via its manifest)."""
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    feats = {m["name"]: d / m["file"] for m in manifest["modalities"]}
    return load_cohort(feats, d / manifest["labels"])


# ---------------------------------------------------------------- preprocessing


def select_top_variant(X, k: int, rows=None):
    """Keep the ``k`` columns with the largest variance over ``rows``.

    Columns come back in descending-variance order, ties broken by the lower
    original index. Returns ``(X[:, selected], selected)``.
    """
    X = np.asarray(X, dtype=np.float64)
    if k < 1 or k > X.shape[1]:
        raise KTooLarge(f"cannot select {k} of {X.shape[1]} columns")
    fit = X if rows is None else X[rows]
    # sorting each column first makes the rounding independent of row order
    var = np.sort(fit, axis=0).var(axis=0)
    order = np.lexsort((np.arange(X.shape[1]), -var))[:k]
    return X[:, order], order


def normalize(X, method: str = MINMAX01, fit_rows=None):
    """Fit a per-column transform on ``fit_rows`` (all rows by default) and apply it to every row.

    MINMAX01 maps the fit-row minimum to 0 and maximum to 1; ZSCORE
    subtracts the fit-row mean and divides by the population std. Constant
    columns map to 0 under both. Returns ``(transformed, params)``.
    """
    X = np.asarray(X, dtype=np.float64)
    fit = X if fit_rows is None else X[fit_rows]
    if fit.shape[0] == 0:
        raise ValueError("fit_rows must be nonempty")
    if method == MINMAX01:
        shift = fit.min(axis=0)
        spread = fit.max(axis=0) - shift
    elif method == ZSCORE:
        shift = fit.mean(axis=0)
        spread = fit.std(axis=0)
    else:
        raise ValueError(f"unknown normalization {method!r}")
    params = {"method": method, "shift": shift, "scale": np.where(spread > 0, spread, 0.0)}
    return apply_normalization(X, params), params


def apply_normalization(X, params) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    scale = params["scale"]
    safe = np.where(scale > 0, scale, 1.0)
    return np.where(scale > 0, (X - params["shift"]) / safe, 0.0)


def preprocess(cohort: Cohort, fit_rows=None, top_k: Mapping[str, int] | None = None,
               method: str | None = MINMAX01) -> dict:
    """Variance selection then normalization per modality, fit on ``fit_rows``.

    ``fit_rows=None`` fits on the whole cohort. ``top_k`` maps a modality to
    the number of columns to keep (modalities with fewer columns are kept
    whole). Returns ``{name: matrix}`` for all patients.
    """
    out = {}
    for name, X in cohort.modalities.items():
        k = (top_k or {}).get(name)
        if k is not None and k < X.shape[1]:
            X, _ = select_top_variant(X, k, fit_rows)
        if method is not None:
            X, _ = normalize(X, method, fit_rows)
        out[name] = X
    return out


# ---------------------------------------------------------------- splits


@dataclass(frozen=True)
class SplitPlan:
    """Per-fold ``{"train", "validation", "test"}`` index arrays."""

    n_folds: int
    seed: int
    folds: tuple

    def to_dict(self) -> dict:
        return {"n_folds": self.n_folds, "seed": self.seed,
                "folds": [{k: v.tolist() for k, v in f.items()} for f in self.folds]}


def _round_robin(strata, n_groups):
    """Deal the concatenated (already shuffled) strata into groups like cards."""
    flat = np.concatenate(strata)
    return [np.sort(flat[g::n_groups]) for g in range(n_groups)]


def stratified_splits(survival: SurvivalDataset, n_folds: int = 5, seed: int = 0) -> SplitPlan:
    """Stratified k-fold test sets plus a stratified 7:1 train/validation cut of each remainder.

    Event and non-event patients are shuffled separately, concatenated and
    dealt round-robin, so every group's size and event count are within one
    of their ideal shares. The validation set of a fold is every eighth
    patient of the dealt remainder, i.e. ``ceil(M / 8)`` of its ``M``
    patients; with 5 folds this gives the 70/10/20 proportions.
    """
    if n_folds < 2:
        raise ValueError("n_folds must be at least 2")
    events = np.flatnonzero(survival.event)
    others = np.flatnonzero(~survival.event)
    if min(events.size, others.size) < n_folds:
        raise StratumTooSmall(
            f"{events.size} event and {others.size} non-event patients; each needs >= {n_folds}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, n_folds]))
    tests = _round_robin([rng.permutation(events), rng.permutation(others)], n_folds)
    folds = []
    for test in tests:
        in_test = np.zeros(len(survival), dtype=bool)
        in_test[test] = True
        rest = [rng.permutation(s[~in_test[s]]) for s in (events, others)]
        flat = np.concatenate(rest)
        val_mask = np.arange(flat.size) % 8 == 0
        folds.append({"train": np.sort(flat[~val_mask]), "validation": np.sort(flat[val_mask]),
                      "test": test})
    return SplitPlan(n_folds, seed, tuple(folds))


# ---------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SyntheticConfig:
    """Exponential proportional-hazards cohort with a tunable interaction.

    The first two modalities carry signal through unit-norm projections
    ``u1``, ``u2``; any further modality is noise. True risk is
    ``a*u1 + b*u2 + gamma*u1*u2``, event times are exponential with rate
    ``lambda0 * exp(risk)`` and censoring times uniform on ``(0, t_max]``.
    """

    n_patients: int = 130
    dims: Mapping[str, int] = field(default_factory=lambda: {"GEN": 500, "PYRAD": 107, "DN": 1024})
    a: float = 1.0
    b: float = 1.0
    gamma: float = 0.0
    lambda0: float = 1e-3
    t_max: float = 2000.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", {str(k): int(v) for k, v in dict(self.dims).items()})
        if self.n_patients < 1:
            raise ValueError("n_patients must be at least 1")
        if len(self.dims) < 2 or min(self.dims.values()) < 1:
            raise ValueError("need at least two modalities, each with dim >= 1")
        if not all(math.isfinite(v) for v in (self.a, self.b, self.gamma)):
            raise ValueError("a, b and gamma must be finite")
        if not (self.lambda0 > 0 and math.isfinite(self.lambda0)):
            raise ValueError("lambda0 must be positive")
        if not self.t_max > 0:
            raise ValueError("t_max must be positive")

    def to_dict(self) -> dict:
        return {"n_patients": self.n_patients, "dims": dict(self.dims), "a": self.a, "b": self.b,
                "gamma": self.gamma, "lambda0": self.lambda0, "t_max": self.t_max, "seed": self.seed}


def generate_synthetic(config: SyntheticConfig) -> tuple[Cohort, np.ndarray]:
    """Draw a synthetic cohort; returns ``(cohort, true_risk)``."""
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    n = config.n_patients
    mods, latents = {}, []
    for name, d in config.dims.items():
        w = rng.standard_normal(d)
        w /= np.linalg.norm(w)
        X = rng.standard_normal((n, d))
        mods[name] = X
        latents.append(X @ w)
    u1, u2 = latents[0], latents[1]
    risk = config.a * u1 + config.b * u2 + config.gamma * u1 * u2
    event_time = rng.standard_exponential(n) / (config.lambda0 * np.exp(risk))
    censor_time = config.t_max * (1.0 - rng.random(n))  # in (0, t_max]
    event = event_time <= censor_time
    time = np.maximum(np.minimum(event_time, censor_time), np.finfo(float).tiny)
    width = len(str(n))
    ids = tuple(f"P{i:0{width}d}" for i in range(n))
    return Cohort(ids, mods, SurvivalDataset(event, time)), risk
