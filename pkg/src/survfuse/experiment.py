"""Cross-validated evaluation of model lists on a cohort.

An :class:`ExperimentConfig` names a cohort (files, a saved cohort directory
or a synthetic generator), preprocessing options, the models to compare and
the training settings. :func:`run_cv` fits every model on every fold and
returns one :class:`RunResult` per (model, fold); :func:`write_report` turns
them into delimited files.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .coxnet import CoxnetConfig, fit_path, predict_risk, select_lambda
from .data import (MINMAX01, ZSCORE, Cohort, SyntheticConfig, apply_normalization, generate_synthetic,
                   load_cohort, load_cohort_dir, normalize, select_top_variant, stratified_splits)
from .exceptions import ConfigError, IncompatibleModel, SurvfuseError
from .fusion import LINEAR_KINDS, FusionSpec, ModalitySpec, build_graph, early_fuse, late_fuse_risks
from .nn.training import Split, TrainConfig, predict, train
from .serialize import ModelFile, save_model
from .survival import concordance_index, td_auc

logger = logging.getLogger(__name__)

__all__ = [
    "ModelEntry",
    "ExperimentConfig",
    "RunResult",
    "load_config",
    "load_experiment_cohort",
    "fold_features",
    "run_cv",
    "write_report",
    "model_scores",
    "LINEAR_TABLE",
]

_SHORT = {"GEN": "G", "PYRAD": "P", "DN": "D"}

# the nine linear rows: single-modality Cox, then early and late fusion combinations
LINEAR_TABLE = (
    [{"kind": "COX", "modalities": [m]} for m in ("GEN", "PYRAD", "DN")]
    + [{"kind": k, "modalities": ms} for k in ("EARLY_LINEAR", "LATE_LINEAR")
       for ms in (["GEN", "PYRAD"], ["GEN", "DN"], ["GEN", "PYRAD", "DN"])]
)


@dataclass(frozen=True)
class ModelEntry:
    """A model in the config: its kind, modality names and architecture knobs."""

    kind: str
    modalities: tuple
    name: str | None = None
    options: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d) -> "ModelEntry":
        d = dict(d)
        try:
            kind, mods = d.pop("kind"), d.pop("modalities")
        except KeyError as exc:
            raise ConfigError(f"model entry is missing {exc}") from None
        mods = tuple(m["name"] if isinstance(m, dict) else str(m) for m in mods)
        name = d.pop("name", None)
        unknown = set(d) - {"l", "R", "b", "c", "dropout"}
        if unknown:
            raise ConfigError(f"unknown model options {sorted(unknown)}")
        entry = cls(kind, mods, name, d)
        entry.spec({m: 1 for m in mods})  # validates kind and modality count
        return entry

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "modalities": list(self.modalities), **self.options}
        if self.name is not None:
            d["name"] = self.name
        return d

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        short = ",".join(_SHORT.get(m, m) for m in self.modalities)
        prefix = {"COX": "Cox", "EARLY_LINEAR": "EF", "LATE_LINEAR": "LF", "LF_MLP": "LF-MLP",
                  "SINGLE_MLP": "MLP"}.get(self.kind, self.kind)
        return f"{prefix}({short})"

    def spec(self, dims) -> FusionSpec:
        try:
            return FusionSpec(self.kind, tuple(ModalitySpec(m, dims[m]) for m in self.modalities),
                              **self.options)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"model {self.to_dict()}: {exc}") from None


def _dataclass_from(cls, d, what):
    d = dict(d or {})
    allowed = {f.name for f in fields(cls)}
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown {what} keys {sorted(unknown)}")
    for k in ("weight_decay_grid", "lambdas"):
        if isinstance(d.get(k), list):
            d[k] = tuple(d[k])
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {what}: {exc}") from None


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce a cross-validation report.

    ``cohort`` is one of ``{"dir": path}``, ``{"features": {name: path},
    "labels": path}`` or ``{"synthetic": {...SyntheticConfig fields}}``.
    ``top_k`` maps a modality to the number of highest-variance columns to
    keep; ``paper_global`` fits selection and normalization on the whole
    cohort instead of each fold's training rows.
    """

    cohort: dict
    models: tuple
    loss: str = "RANKING"
    top_k: dict = field(default_factory=dict)
    normalization: str | None = MINMAX01
    paper_global: bool = False
    n_folds: int = 5
    seed: int = 0
    train: TrainConfig = TrainConfig()
    coxnet: CoxnetConfig = CoxnetConfig()
    save_models: bool = True

    def __post_init__(self):
        if not self.models:
            raise ConfigError("the model list is empty")
        if self.loss not in ("RANKING", "COX_NPLL"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.normalization not in (MINMAX01, ZSCORE, None):
            raise ConfigError(f"unknown normalization {self.normalization!r}")
        if self.n_folds < 2:
            raise ConfigError("n_folds must be at least 2")
        keys = set(self.cohort)
        if keys not in ({"dir"}, {"features", "labels"}, {"synthetic"}):
            raise ConfigError("cohort must be {dir}, {features, labels} or {synthetic}")
        labels = [m.label for m in self.models]
        if len(set(labels)) != len(labels):
            raise ConfigError("model labels must be unique; set 'name' to disambiguate")

    @classmethod
    def from_dict(cls, d) -> "ExperimentConfig":
        d = dict(d)
        if "models" not in d or "cohort" not in d:
            raise ConfigError("config needs 'cohort' and 'models'")
        models = d.pop("models")
        if models == "LINEAR_TABLE":
            models = LINEAR_TABLE
        d["models"] = tuple(ModelEntry.from_dict(m) for m in models)
        d["train"] = _dataclass_from(TrainConfig, d.get("train"), "train")
        d["coxnet"] = _dataclass_from(CoxnetConfig, d.get("coxnet"), "coxnet")
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        tc, cc = asdict(self.train), asdict(self.coxnet)
        tc["weight_decay_grid"] = list(tc["weight_decay_grid"])
        if cc["lambdas"] is not None:
            cc["lambdas"] = list(cc["lambdas"])
        return {
            "cohort": self.cohort,
            "models": [m.to_dict() for m in self.models],
            "loss": self.loss,
            "top_k": dict(self.top_k),
            "normalization": self.normalization,
            "paper_global": self.paper_global,
            "n_folds": self.n_folds,
            "seed": self.seed,
            "train": tc,
            "coxnet": cc,
            "save_models": self.save_models,
        }


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return ExperimentConfig.from_dict(raw)


def load_experiment_cohort(config: ExperimentConfig, base_dir=None) -> tuple[Cohort, np.ndarray | None]:
    """The configured cohort and, for synthetic cohorts, the true risk."""
    base = Path(base_dir or ".")
    c = config.cohort
    if "synthetic" in c:
        syn = dict(c["synthetic"])
        syn.setdefault("seed", config.seed)
        return generate_synthetic(_dataclass_from(SyntheticConfig, syn, "synthetic"))
    if "dir" in c:
        return load_cohort_dir(base / c["dir"]), None
    return load_cohort({k: base / v for k, v in c["features"].items()}, base / c["labels"]), None


# ---------------------------------------------------------------- per-fold work


def _prep_params(X, fit_rows, k, method):
    """Fit selection then normalization on ``fit_rows``; return the serializable recipe."""
    cols = np.arange(X.shape[1])
    if k is not None and k < X.shape[1]:
        _, cols = select_top_variant(X, k, fit_rows)
    recipe = {"columns": [int(i) for i in cols], "method": method}
    if method is not None:
        _, p = normalize(X[:, cols], method, fit_rows)
        recipe["shift"], recipe["scale"] = p["shift"].tolist(), p["scale"].tolist()
    return recipe


def apply_recipe(X, recipe) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    cols = np.asarray(recipe["columns"], dtype=int)
    if cols.size and cols.max() >= X.shape[1]:
        raise IncompatibleModel(f"model expects at least {cols.max() + 1} raw columns, got {X.shape[1]}")
    X = X[:, cols]
    if recipe.get("method") is None:
        return X
    return apply_normalization(X, {"shift": np.asarray(recipe["shift"]), "scale": np.asarray(recipe["scale"])})


def fold_features(cohort: Cohort, fit_rows, top_k, method, modalities):
    """Preprocessed matrices for the listed modalities plus their recipes."""
    recipes, mats = {}, {}
    for m in modalities:
        X = cohort.modalities[m]
        recipes[m] = _prep_params(X, fit_rows, top_k.get(m), method)
        mats[m] = apply_recipe(X, recipes[m])
    return mats, recipes


def _seed_for(seed, *keys) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def _inner_split(survival, rows, seed):
    """Stratified 7:1 cut of ``rows`` for choosing lambda."""
    rng = np.random.default_rng(seed)
    strata = [rng.permutation(rows[survival.event[rows] == flag]) for flag in (True, False)]
    flat = np.concatenate(strata)
    val = np.arange(flat.size) % 8 == 0
    return np.sort(flat[~val]), np.sort(flat[val])


def _fit_coxnet(X, survival, rows, config: CoxnetConfig, seed):
    """Pick lambda on an inner split of ``rows``, then refit on all of ``rows``."""
    inner, held = _inner_split(survival, rows, seed)
    path = fit_path(X[inner], survival.subset(inner), config)
    chosen = select_lambda(path, X[held], survival.subset(held))
    lambdas = tuple(m.lam for m in path if m.lam >= chosen.lam)
    refit = fit_path(X[rows], survival.subset(rows), replace(config, lambdas=lambdas))
    return refit[-1]


def model_scores(model: ModelFile, raw: dict) -> np.ndarray:
    """Risk scores from a saved model for raw (unprocessed) modality matrices."""
    from .coxnet import CoxnetModel
    from .nn.autodiff import Params

    spec = model.spec
    recipes = model.metadata.get("preprocessing", {})
    missing = [m.name for m in spec.modalities if m.name not in raw]
    if missing:
        raise IncompatibleModel(f"cohort lacks modalities {missing}")
    feats = {}
    for m in spec.modalities:
        X = apply_recipe(raw[m.name], recipes[m.name]) if m.name in recipes else np.asarray(raw[m.name])
        if X.shape[1] != m.dim:
            raise IncompatibleModel(f"modality {m.name!r}: model expects {m.dim} features, got {X.shape[1]}")
        feats[m.name] = X
    if spec.is_neural:
        graph = build_graph(spec)
        if graph.spec_hash() != model.graph_hash:
            raise IncompatibleModel("model file does not match its architecture")
        return predict(graph, Params(model.arrays, graph.decayed), feats)

    def linear(prefix, X):
        a = model.arrays
        cm = CoxnetModel(a[prefix + "beta"], float(model.metadata.get("lambda", math.nan)),
                         float(model.metadata.get("alpha", math.nan)), True, 0,
                         a[prefix + "center"], a[prefix + "scale"])
        return predict_risk(cm, X)

    if spec.kind == "LATE_LINEAR":
        return late_fuse_risks([linear(f"{m.name}.", feats[m.name]) for m in spec.modalities])
    X, _ = early_fuse([feats[m.name] for m in spec.modalities])
    return linear("", X)


@dataclass
class RunResult:
    model: str
    fold: int
    c_index: float
    mean_td_auc: float
    curve: list
    selected: str
    seed: int
    steps: int
    n_discarded: int
    status: str = "ok"


def _run_one(task):
    """One (model, fold) evaluation; errors become NaN results."""
    cohort, entry, fold_index, fold, cfg, model_path = task
    label = entry.label
    seed = _seed_for(cfg.seed, fold_index)
    try:
        fit_rows = None if cfg.paper_global else fold["train"]
        mats, recipes = fold_features(cohort, fit_rows, cfg.top_k, cfg.normalization, entry.modalities)
        spec = entry.spec({m: X.shape[1] for m, X in mats.items()})
        surv = cohort.survival
        test = fold["test"]
        meta = {"preprocessing": recipes, "fold": fold_index, "seed": seed}
        steps = n_disc = 0
        if spec.kind in LINEAR_KINDS:
            if spec.kind == "LATE_LINEAR":
                fits = {m: _fit_coxnet(mats[m], surv, fold["train"], cfg.coxnet, seed) for m in entry.modalities}
                scores = late_fuse_risks([predict_risk(fits[m], mats[m][test]) for m in entry.modalities])
                arrays = {f"{m}.{k}": getattr(fits[m], k) for m in entry.modalities
                          for k in ("beta", "center", "scale")}
                selected = ";".join(f"lambda_{m}={fits[m].lam!r}" for m in entry.modalities)
                meta["alpha"] = cfg.coxnet.alpha
            else:
                X, _ = early_fuse([mats[m] for m in entry.modalities])
                fit = _fit_coxnet(X, surv, fold["train"], cfg.coxnet, seed)
                scores = predict_risk(fit, X[test])
                arrays = {k: getattr(fit, k) for k in ("beta", "center", "scale")}
                selected = f"lambda={fit.lam!r}"
                meta.update(alpha=fit.alpha, **{"lambda": fit.lam})
        else:
            graph = build_graph(spec)
            split = lambda rows: Split({m: mats[m][rows] for m in entry.modalities}, surv.subset(rows))  # noqa: E731
            outcome = train(graph, {"train": split(fold["train"]), "validation": split(fold["validation"])},
                            cfg.loss, replace(cfg.train, seed=seed))
            scores = predict(graph, outcome.params, {m: mats[m][test] for m in entry.modalities})
            arrays = outcome.params.arrays
            selected = f"weight_decay={outcome.weight_decay!r};init={outcome.init_index}"
            steps, n_disc = outcome.steps_taken, outcome.n_discarded
            meta.update(weight_decay=outcome.weight_decay, init_index=outcome.init_index,
                        best_val_cindex=outcome.best_val_cindex)
        test_surv = surv.subset(test)
        c = concordance_index(test_surv, scores).c_index
        try:
            curve = td_auc(test_surv, scores)
            points, mean_auc = list(zip(curve.grid.tolist(), curve.auc_at.tolist())), curve.mean_auc
        except SurvfuseError as exc:
            logger.warning("%s fold %d: no TD-AUC (%s)", label, fold_index, exc)
            points, mean_auc = [], math.nan
        if model_path is not None:
            mf = ModelFile(spec, arrays, meta,
                           build_graph(spec).spec_hash() if spec.is_neural else None)
            save_model(model_path, mf)
        return RunResult(label, fold_index, float(c), float(mean_auc), points, selected, seed, steps, n_disc)
    except (SurvfuseError, ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        logger.warning("%s fold %d failed: %s", label, fold_index, exc)
        return RunResult(label, fold_index, math.nan, math.nan, [], "", seed, 0, 0,
                         f"error: {type(exc).__name__}: {exc}")


def _model_filename(label, fold):
    safe = "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in label).strip("_")
    return f"{safe}_fold{fold}.sfm"


def run_cv(config: ExperimentConfig, cohort: Cohort, jobs: int = 1, model_dir=None) -> list[RunResult]:
    """Evaluate every configured model on every fold.

    Results come back ordered by (model list position, fold) whatever the
    execution order, so reports do not depend on ``jobs``.
    """
    for entry in config.models:
        absent = [m for m in entry.modalities if m not in cohort.modalities]
        if absent:
            raise ConfigError(f"model {entry.label} uses modalities missing from the cohort: {absent}")
    plan = stratified_splits(cohort.survival, config.n_folds, config.seed)
    if model_dir is not None:
        Path(model_dir).mkdir(parents=True, exist_ok=True)
    tasks = [(cohort, e, k, f, config,
              None if model_dir is None else Path(model_dir) / _model_filename(e.label, k))
             for e in config.models for k, f in enumerate(plan.folds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_one, tasks))
    return [_run_one(t) for t in tasks]


def _fmt(x) -> str:
    return "nan" if isinstance(x, float) and math.isnan(x) else repr(x)


def write_report(results: list[RunResult], config: ExperimentConfig, out_dir) -> dict:
    """Write the C-index grid, the long-form report, TD-AUC curves and a summary.

    Returns ``{kind: path}`` of the files written.
    """
    out = Path(out_dir)
    (out / "curves").mkdir(parents=True, exist_ok=True)
    labels = [m.label for m in config.models]
    folds = sorted({r.fold for r in results})
    by_key = {(r.model, r.fold): r for r in results}
    paths = {}

    paths["config"] = out / "config.json"
    paths["config"].write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")

    paths["grid"] = out / "cindex_grid.csv"
    with open(paths["grid"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", *[f"fold{k}" for k in folds]])
        for label in labels:
            w.writerow([label, *[_fmt(by_key[label, k].c_index) for k in folds]])

    paths["report"] = out / "report.csv"
    with open(paths["report"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "fold", "c_index", "mean_td_auc", "selected", "seed", "steps",
                    "n_discarded", "status"])
        for label in labels:
            for k in folds:
                r = by_key[label, k]
                w.writerow([r.model, r.fold, _fmt(r.c_index), _fmt(r.mean_td_auc), r.selected, r.seed,
                            r.steps, r.n_discarded, r.status])
                with open(out / "curves" / f"{_model_filename(label, k)[:-4]}.csv", "w", newline="") as cf:
                    cw = csv.writer(cf, lineterminator="\n")
                    cw.writerow(["t", "auc"])
                    cw.writerows([repr(t), repr(a)] for t, a in r.curve)
                    cw.writerow(["mean_auc", _fmt(r.mean_td_auc)])

    paths["summary"] = out / "summary.txt"
    width = max(len(s) for s in labels + ["model"])
    lines = [f"{'model':<{width}}  " + "  ".join(f"fold{k:<3d}" for k in folds) + "  mean    std"]
    for label in labels:
        cs = np.array([by_key[label, k].c_index for k in folds])
        ok = cs[~np.isnan(cs)]
        mean = f"{ok.mean():.4f}" if ok.size else "nan   "
        std = f"{ok.std():.4f}" if ok.size else "nan"
        cells = "  ".join("nan    " if np.isnan(c) else f"{c:.4f} " for c in cs)
        lines.append(f"{label:<{width}}  {cells}  {mean}  {std}")
    failed = [r for r in results if r.status != "ok"]
    if failed:
        lines.append("")
        lines += [f"failed: {r.model} fold {r.fold}: {r.status}" for r in failed]
    paths["summary"].write_text("\n".join(lines) + "\n")
    return paths
