"""Command-line entry point: ``survfuse {synth,cv,tdauc,gradcheck}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import SyntheticConfig, generate_synthetic, load_cohort_dir, save_cohort, stratified_splits
from .exceptions import ConfigError, SurvfuseError
from .experiment import ExperimentConfig, load_config, load_experiment_cohort, model_scores, run_cv, write_report
from .fusion import FusionSpec, build_graph
from .nn.training import EVAL, TRAIN, gradient_check_report
from .serialize import load_model
from .survival import SurvivalDataset, td_auc

logger = logging.getLogger("survfuse")

GRADCHECK_TOL = 1e-4


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None


def cmd_synth(args) -> int:
    raw = _read_json(args.config) if args.config else {}
    raw = raw.get("synthetic", raw)
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        cfg = SyntheticConfig(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid synthetic config: {exc}") from None
    cohort, risk = generate_synthetic(cfg)
    out = Path(args.out)
    manifest = save_cohort(cohort, out)
    with open(out / "true_risk.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "risk"])
        w.writerows([p, repr(float(r))] for p, r in zip(cohort.patient_ids, risk))
    (out / "synthetic_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(cohort)} patients to {manifest.parent}")
    return 0


def cmd_cv(args) -> int:
    if not args.config:
        raise ConfigError("cv needs --config")
    config = load_config(args.config)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.paper_global:
        config = replace(config, paper_global=True)
    cohort, _ = load_experiment_cohort(config, Path(args.config).parent)
    out = Path(args.out or "results")
    out.mkdir(parents=True, exist_ok=True)
    results = run_cv(config, cohort, jobs=args.jobs, model_dir=out / "models" if config.save_models else None)
    paths = write_report(results, config, out)
    print(paths["summary"].read_text(), end="")
    return 0


def _parse_grid(text):
    if text is None:
        return None
    try:
        return np.array([float(v) for v in text.split(",") if v.strip()])
    except ValueError:
        raise ConfigError(f"grid must be comma-separated numbers, got {text!r}") from None


def _read_scores(path, ids):
    scores = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for row in reader:
            if row:
                scores[row[0]] = float(row[1])
    missing = [p for p in ids if p not in scores]
    if missing:
        raise ConfigError(f"{len(missing)} patient(s) have no score, e.g. {missing[0]!r}")
    return np.array([scores[p] for p in ids])


def cmd_tdauc(args) -> int:
    if (args.model is None) == (args.scores is None):
        raise ConfigError("tdauc needs exactly one of --model or --scores")
    cohort = load_cohort_dir(args.cohort)
    if args.fold is None:
        rows = np.arange(len(cohort))
    else:
        plan = stratified_splits(cohort.survival, args.n_folds, args.split_seed)
        if not 0 <= args.fold < plan.n_folds:
            raise ConfigError(f"fold must lie in [0, {plan.n_folds})")
        rows = plan.folds[args.fold]["test"]
    if args.model is not None:
        model = load_model(args.model)
        scores = model_scores(model, {k: X[rows] for k, X in cohort.modalities.items()})
    else:
        scores = _read_scores(args.scores, [cohort.patient_ids[i] for i in rows])
    surv = SurvivalDataset(cohort.survival.event[rows], cohort.survival.time[rows])
    curve = td_auc(surv, scores, _parse_grid(args.grid), args.weighting)
    lines = ["t,auc", *(f"{t!r},{a!r}" for t, a in zip(curve.grid.tolist(), curve.auc_at.tolist())),
             f"mean_auc,{curve.mean_auc!r}"]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _gradcheck_spec(args) -> FusionSpec:
    if args.config:
        raw = _read_json(args.config)
        raw = raw.get("spec", raw)
    else:
        raw = {"kind": args.kind, "modalities": args.modalities.split(",")}
    try:
        return FusionSpec.from_dict(raw)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid model spec: {exc}") from None


def cmd_gradcheck(args) -> int:
    spec = _gradcheck_spec(args)
    if not spec.is_neural:
        raise ConfigError(f"{spec.kind} has no neural graph to check")
    graph = build_graph(spec)
    seed0 = 0 if args.seed is None else args.seed
    worst = 0.0
    for s in range(seed0, seed0 + args.n_seeds):
        rng = np.random.default_rng(s)
        n = args.n_patients
        inputs = {m: rng.standard_normal((n, d)) for m, d in graph.input_dims.items()}
        event = rng.random(n) < 0.6
        event[0] = True
        surv = SurvivalDataset(event, rng.exponential(size=n) + 0.1)
        params = graph.init_params(rng)
        report = gradient_check_report(graph, params, inputs, surv, args.loss, n_samples=args.samples,
                                       seed=s, mode=TRAIN if args.train_mode else EVAL,
                                       corrupt=args.corrupt)
        worst = max(worst, report.max_relative_error)
        print(f"seed {s}: max relative error {report.max_relative_error:.3e} "
              f"({report.n_checked} checked, {report.n_skipped} skipped at ReLU kinks)")
    ok = worst <= GRADCHECK_TOL
    print(f"{spec.kind}: max relative error {worst:.3e} -> {'PASS' if ok else 'FAIL'} (tol {GRADCHECK_TOL:g})")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="survfuse", description="Multimodal survival fusion experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--out", help=out_help)
        p.add_argument("--seed", type=int, help="override the configured seed")

    p = sub.add_parser("synth", help="write a synthetic cohort")
    common(p, "output directory (default: synthetic)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("cv", help="cross-validate the configured models")
    common(p, "report directory (default: results)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--paper-global", action="store_true",
                   help="fit feature selection and normalization on the whole cohort")
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("tdauc", help="time-dependent AUC curve of a model or score file")
    p.add_argument("--cohort", required=True, help="cohort directory (with manifest.json)")
    p.add_argument("--model", help="model file written by 'cv'")
    p.add_argument("--scores", help="CSV of patient_id,score instead of a model")
    p.add_argument("--fold", type=int, help="evaluate on this fold's test set (default: all patients)")
    p.add_argument("--n-folds", type=int, default=5)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--grid", help="comma-separated evaluation times (default: event-time quantiles)")
    p.add_argument("--weighting", choices=("NONE", "IPCW"), default="NONE")
    p.add_argument("--out", help="output CSV (default: stdout)")
    p.set_defaults(func=cmd_tdauc)

    p = sub.add_parser("gradcheck", help="finite-difference check of a neural architecture")
    p.add_argument("--config", help="JSON file holding a model spec")
    p.add_argument("--kind", default="IF")
    p.add_argument("--modalities", default="GEN,PYRAD")
    p.add_argument("--loss", choices=("RANKING", "COX_NPLL"), default="RANKING")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-seeds", type=int, default=1)
    p.add_argument("--n-patients", type=int, default=8)
    p.add_argument("--samples", type=int, default=100, help="parameter entries per seed")
    p.add_argument("--train-mode", action="store_true", help="check with (frozen) dropout active")
    p.add_argument("--corrupt", type=float, default=0.0, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "synth" and not args.out:
        args.out = "synthetic"
    try:
        return args.func(args)
    except (SurvfuseError, OSError) as exc:
        print(f"survfuse {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
