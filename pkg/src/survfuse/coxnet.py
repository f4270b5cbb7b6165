"""Elastic-net penalized Cox proportional hazards fitted along a lambda path.

The penalized objective, on column-standardized features, is::

    NLPL(beta) / N + lam * (alpha * |beta|_1 + (1 - alpha) / 2 * |beta|_2^2)

where ``NLPL`` is the negative Breslow partial log-likelihood. It is
minimized by cyclic coordinate descent on a sequence of quadratic
approximations (exact Hessian, formed only for the working set), with warm starts
from ``lambda_max`` downward.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .exceptions import AlphaZero, DimensionMismatch, EmptyPath, NoEvents
from .survival import SurvivalDataset, concordance_index

logger = logging.getLogger(__name__)

__all__ = [
    "CoxnetConfig",
    "CoxnetModel",
    "BaselineHazard",
    "neg_log_partial_likelihood",
    "pl_gradient",
    "soft_threshold",
    "lambda_max",
    "fit_path",
    "select_lambda",
    "predict_risk",
    "breslow_baseline",
    "kkt_violation",
]


@dataclass(frozen=True)
class CoxnetConfig:
    alpha: float = 0.5
    n_lambdas: int = 100
    lambda_min_ratio: float | None = None
    max_iters: int = 100
    tol: float = 1e-7
    lambdas: tuple | None = None

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.lambda_min_ratio is not None and not 0.0 < self.lambda_min_ratio < 1.0:
            raise ValueError("lambda_min_ratio must lie in (0, 1)")
        if self.n_lambdas < 1 or self.max_iters < 1 or self.tol <= 0:
            raise ValueError("n_lambdas, max_iters and tol must be positive")


@dataclass(frozen=True)
class CoxnetModel:
    """One fitted point on the path.

    ``beta`` lives on the standardized scale; ``center`` and ``scale`` map raw
    features onto it (dropped constant columns have ``scale == 0`` and a zero
    coefficient).
    """

    beta: np.ndarray
    lam: float
    alpha: float
    converged: bool
    n_iters: int
    center: np.ndarray = field(repr=False, default=None)
    scale: np.ndarray = field(repr=False, default=None)

    def standardize(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.beta.size:
            raise DimensionMismatch(f"expected {self.beta.size} columns, got shape {X.shape}")
        if self.center is None:
            return X
        safe = np.where(self.scale > 0, self.scale, 1.0)
        return np.where(self.scale > 0, (X - self.center) / safe, 0.0)

    def to_dict(self) -> dict:
        return {
            "beta": self.beta.tolist(),
            "lambda": self.lam,
            "alpha": self.alpha,
            "converged": self.converged,
            "n_iters": self.n_iters,
            "center": None if self.center is None else self.center.tolist(),
            "scale": None if self.scale is None else self.scale.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CoxnetModel":
        arr = lambda v: None if v is None else np.asarray(v, dtype=np.float64)  # noqa: E731
        return cls(arr(d["beta"]), d["lambda"], d["alpha"], d["converged"], d["n_iters"],
                   arr(d["center"]), arr(d["scale"]))


@dataclass(frozen=True)
class BaselineHazard:
    """Cumulative baseline hazard as a right-continuous step function."""

    times: np.ndarray
    increments: np.ndarray

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.increments)

    def __call__(self, t):
        idx = np.searchsorted(self.times, np.asarray(t, dtype=np.float64), side="right")
        cum = np.concatenate([[0.0], self.cumulative])
        out = cum[idx]
        return out if out.ndim else float(out)


def _check(X, dataset: SurvivalDataset, beta=None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != len(dataset):
        raise DimensionMismatch(f"X has {X.shape[0]} rows for {len(dataset)} patients")
    if beta is not None and np.size(beta) != X.shape[1]:
        raise DimensionMismatch(f"beta has {np.size(beta)} entries for {X.shape[1]} columns")
    if dataset.n_events == 0:
        raise NoEvents("the partial likelihood needs at least one event")
    return X


class _RiskSets:
    """Sorted-time bookkeeping for Breslow risk sets ``{j : t_j >= t_i}``."""

    def __init__(self, dataset: SurvivalDataset):
        self.order = np.argsort(dataset.time, kind="mergesort")
        t = dataset.time[self.order]
        self.event = dataset.event[self.order]
        # first sorted position sharing each patient's time: start of its risk set
        self.start = np.searchsorted(t, t, side="left")
        # last sorted position sharing it: events tied with k are in k's sums
        self.block_end = np.searchsorted(t, t, side="right") - 1

    def log_risk_sums(self, eta_sorted: np.ndarray) -> np.ndarray:
        m = eta_sorted.max()
        rev = np.cumsum(np.exp(eta_sorted - m)[::-1])[::-1]
        return np.log(rev[self.start]) + m

    def eta_gradient(self, eta: np.ndarray):
        """Gradient and diagonal Hessian of NLPL with respect to ``eta``."""
        es = eta[self.order]
        m = es.max()
        w = np.exp(es - m)
        denom = np.cumsum(w[::-1])[::-1][self.start]
        ev = self.event.astype(float)
        # patient k collects 1/S_i and 1/S_i^2 over events i with t_i <= t_k
        inv = np.where(self.event, 1.0 / denom, 0.0)
        inv2 = np.where(self.event, 1.0 / denom**2, 0.0)
        c1 = np.cumsum(inv)
        c2 = np.cumsum(inv2)
        s1 = c1[self.block_end]
        s2 = c2[self.block_end]
        grad_s = w * s1 - ev
        hess_s = w * s1 - w**2 * s2
        grad = np.empty(es.size)
        hess = np.empty(es.size)
        grad[self.order] = grad_s
        hess[self.order] = hess_s
        return grad, hess

    def newton_parts(self, eta: np.ndarray, Z: np.ndarray):
        """Pieces of the exact NLPL Hessian in coefficient space.

        Returns ``(grad, diag_w, means)`` with ``grad = Z.T @ dNLPL/deta``,
        ``diag_w`` the per-patient weights of the ``Z.T diag(w) Z`` term and
        ``means`` the risk-set weighted means of ``Z`` (one row per event),
        so that the Hessian is ``Z.T diag(diag_w) Z - means.T @ means``.
        """
        es = eta[self.order]
        m = es.max()
        w = np.exp(es - m)
        denom = np.cumsum(w[::-1])[::-1][self.start]
        s1 = np.cumsum(np.where(self.event, 1.0 / denom, 0.0))[self.block_end]
        Zs = Z[self.order]
        tail = np.cumsum((w[:, None] * Zs)[::-1], axis=0)[::-1]
        ev = np.flatnonzero(self.event)
        means = tail[self.start[ev]] / denom[ev, None]
        grad_s = w * s1 - self.event
        diag_w = np.empty(es.size)
        diag_w[self.order] = w * s1
        return Zs.T @ grad_s, diag_w, means


def _nlpl_eta(eta: np.ndarray, rs: _RiskSets) -> float:
    es = eta[rs.order]
    return float(np.sum((rs.log_risk_sums(es) - es)[rs.event]))


def neg_log_partial_likelihood(beta, X, dataset: SurvivalDataset) -> float:
    """Negative Breslow partial log-likelihood.

    ``-sum_{i: e_i} [x_i . beta - log sum_{j: t_j >= t_i} exp(x_j . beta)]``
    """
    X = _check(X, dataset, beta)
    eta = X @ np.asarray(beta, dtype=np.float64).ravel()
    return _nlpl_eta(eta, _RiskSets(dataset))


def pl_gradient(beta, X, dataset: SurvivalDataset) -> np.ndarray:
    """Gradient of :func:`neg_log_partial_likelihood` with respect to ``beta``."""
    X = _check(X, dataset, beta)
    eta = X @ np.asarray(beta, dtype=np.float64).ravel()
    grad_eta, _ = _RiskSets(dataset).eta_gradient(eta)
    return X.T @ grad_eta


def soft_threshold(z: float, gamma: float) -> float:
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    return float(np.sign(z) * max(abs(z) - gamma, 0.0))


def lambda_max(X, dataset: SurvivalDataset, alpha: float) -> float:
    """Smallest lambda whose elastic-net solution is identically zero."""
    if alpha <= 0:
        raise AlphaZero("lambda_max is infinite for alpha = 0; supply an explicit lambda grid")
    X = _check(X, dataset)
    grad = pl_gradient(np.zeros(X.shape[1]), X, dataset)
    return float(np.max(np.abs(grad)) / (X.shape[0] * alpha))


def _standardize(X: np.ndarray):
    center = X.mean(axis=0)
    scale = X.std(axis=0)
    keep = scale > 1e-12 * np.maximum(1.0, np.abs(center))
    if not np.all(keep):
        logger.warning("dropping %d zero-variance column(s) before fitting", int((~keep).sum()))
    scale = np.where(keep, scale, 0.0)
    Z = np.where(keep, (X - center) / np.where(keep, scale, 1.0), 0.0)
    return Z, center, scale, keep


def _objective(beta, eta, rs, n, lam, alpha) -> float:
    pen = lam * (alpha * np.abs(beta).sum() + 0.5 * (1 - alpha) * beta @ beta)
    return _nlpl_eta(eta, rs) / n + pen


def kkt_violation(beta, X, dataset: SurvivalDataset, lam: float, alpha: float) -> float:
    """Largest elastic-net KKT residual of ``beta`` on (already standardized) ``X``."""
    X = _check(X, dataset, beta)
    g = pl_gradient(beta, X, dataset) / X.shape[0]
    active = beta != 0
    resid = np.where(
        active,
        np.abs(g + lam * (1 - alpha) * beta + lam * alpha * np.sign(beta)),
        np.maximum(np.abs(g) - lam * alpha, 0.0),
    )
    return float(resid.max()) if resid.size else 0.0


def _support_solve(new, r, H, work, l1, l2):
    """Exact minimizer of the inner quadratic if ``new``'s support and signs are right.

    On the support ``S`` the stationarity conditions are linear:
    ``(H_SS + l2 I) b_S = r_S + H_SS new_S - l1 sign(new_S)``. The solution is
    returned as ``(b, r(b))`` only if it keeps the assumed signs and every
    other working coordinate satisfies ``|r_j| <= l1``; otherwise ``None``.
    """
    ks = [k for k, j in enumerate(work) if new[j] != 0]
    if not ks:
        return None
    S = np.array([work[k] for k in ks])
    H_SS = H[S][:, ks]
    s = np.sign(new[S])
    try:
        b_S = np.linalg.solve(H_SS + l2 * np.eye(S.size), r[S] + H_SS @ new[S] - l1 * s)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.sign(b_S) == s):
        return None
    r_new = r - H[:, ks] @ (b_S - new[S])
    others = np.array([j for j in work if new[j] == 0], dtype=int)
    if others.size and np.any(np.abs(r_new[others]) > l1):
        return None
    b = new.copy()
    b[S] = b_S
    return b, r_new


def _cd_solve(Z, rs, beta, lam, alpha, cfg: CoxnetConfig, strong):
    """Minimize the penalized objective at one lambda, starting from ``beta``.

    Outer loop: quadratic expansion of NLPL/N at the current ``beta`` using
    its exact Hessian. Inner loop: cyclic soft-threshold updates on that
    quadratic (covariance form; only the working-set Hessian columns are
    formed), growing the working set until the remaining coordinates satisfy
    the quadratic's KKT conditions.
    """
    n, d = Z.shape
    l1, l2 = lam * alpha, lam * (1 - alpha)
    eta = Z @ beta
    obj = _objective(beta, eta, rs, n, lam, alpha)
    active = strong | (beta != 0)
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        grad, diag_w, means = rs.newton_parts(eta, Z)

        def columns(idx):
            return (Z.T @ (diag_w[:, None] * Z[:, idx]) - means.T @ means[:, idx]) / n

        work = list(np.flatnonzero(active))
        H = columns(work)  # H[:, k] is the Hessian column of coordinate work[k]
        r = -grad / n  # negative gradient of the quadratic at ``new``
        new = beta.copy()
        while True:
            for _ in range(10000):
                max_delta = 0.0
                for k, j in enumerate(work):
                    hjj = H[j, k]
                    if hjj + l2 <= 0:
                        continue
                    old = new[j]
                    num = r[j] + hjj * old
                    bj = np.sign(num) * max(abs(num) - l1, 0.0) / (hjj + l2)
                    if bj != old:
                        r -= H[:, k] * (bj - old)
                        new[j] = bj
                        max_delta = max(max_delta, abs(bj - old))
                if max_delta < cfg.tol:
                    break
                # once the support looks settled, try solving the quadratic on it exactly
                exact = _support_solve(new, r, H, work, l1, l2)
                if exact is not None:
                    new, r = exact
                    break
            viol =np.flatnonzero(~active & (np.abs(r - l2 * new) > l1))
            if viol.size == 0:
                break
            active[viol] = True
            work += list(viol)
            H = np.concatenate([H, columns(viol)], axis=1)

        new_eta = Z @ new
        new_obj = _objective(new, new_eta, rs, n, lam, alpha)
        step = 1.0
        # guard against overshoot far from the optimum: halve toward the previous iterate
        while new_obj > obj + 1e-12 * max(1.0, abs(obj)) and step > 1e-10:
            step *= 0.5
            cand = beta + step * (new - beta)
            cand_eta = Z @ cand
            cand_obj = _objective(cand, cand_eta, rs, n, lam, alpha)
            if cand_obj <= obj:
                new, new_eta, new_obj = cand, cand_eta, cand_obj
                break
        if new_obj > obj:
            converged = np.max(np.abs(new - beta), initial=0.0) < cfg.tol
            break
        delta = np.max(np.abs(new - beta), initial=0.0)
        change = obj - new_obj
        beta, eta, obj = new, new_eta, new_obj
        active |= beta != 0
        if delta < cfg.tol and change < 1e-9:
            converged = True
            break
    return beta, converged, it


def fit_path(X, dataset: SurvivalDataset, config: CoxnetConfig = CoxnetConfig()) -> list[CoxnetModel]:
    """Fit the elastic-net Cox model along a decreasing lambda path.

    Features are centered and scaled to unit variance internally; returned
    coefficients are on that standardized scale. Non-converged fits are
    returned with ``converged=False`` rather than raising.
    """
    X = _check(X, dataset)
    if X.shape[0] < 2:
        raise ValueError("fit_path needs at least two patients")
    n, d = X.shape
    Z, center, scale, keep = _standardize(X)
    rs = _RiskSets(dataset)
    alpha = config.alpha

    if config.lambdas is not None:
        lambdas = np.sort(np.asarray(config.lambdas, dtype=np.float64))[::-1]
        if lambdas.size == 0:
            raise EmptyPath("explicit lambda grid is empty")
        lmax = lambda_max(Z, dataset, alpha) if alpha > 0 else np.inf
    else:
        lmax = lambda_max(Z, dataset, alpha)
        ratio = config.lambda_min_ratio
        if ratio is None:
            ratio = 0.01 if d > n else 1e-4
        lambdas = lmax * np.geomspace(1.0, ratio, config.n_lambdas) if config.n_lambdas > 1 else np.array([lmax])

    g0 = np.abs(pl_gradient(np.zeros(d), Z, dataset)) / n
    beta = np.zeros(d)
    prev_lam = lmax if np.isfinite(lmax) else lambdas[0]
    models = []
    for lam in lambdas:
        if alpha > 0 and lam >= lmax:
            beta = np.zeros(d)
            models.append(CoxnetModel(beta.copy(), float(lam), alpha, True, 0, center, scale))
            prev_lam = lam
            continue
        # sequential strong rule on the gradient at the current warm start
        g = np.abs(pl_gradient(beta, Z, dataset)) / n if np.any(beta) else g0
        strong = (g >= alpha * (2 * lam - prev_lam)) & keep
        beta, converged, iters = _cd_solve(Z, rs, beta.copy(), lam, alpha, config, strong)
        beta = np.where(keep, beta, 0.0)
        models.append(CoxnetModel(beta.copy(), float(lam), alpha, bool(converged), iters, center, scale))
        prev_lam = lam
    return models


def predict_risk(model: CoxnetModel, X) -> np.ndarray:
    """Linear predictor ``beta . x`` on the model's standardized scale."""
    return model.standardize(X) @ model.beta


def select_lambda(path: list[CoxnetModel], X_val, dataset_val: SurvivalDataset) -> CoxnetModel:
    """Path model with the best validation C-index; ties go to the larger lambda."""
    if not path:
        raise EmptyPath("cannot select from an empty path")
    best, best_c = None, -np.inf
    for model in sorted(path, key=lambda m: -m.lam):
        c = concordance_index(dataset_val, predict_risk(model, X_val)).c_index
        if c > best_c:
            best, best_c = model, c
    return best


def breslow_baseline(model: CoxnetModel, X, dataset: SurvivalDataset) -> BaselineHazard:
    """Breslow cumulative baseline hazard for a fitted model."""
    X = _check(X, dataset)
    eta = predict_risk(model, X)
    times = np.unique(dataset.time[dataset.event])
    risk = np.exp(eta)
    increments = np.array([
        dataset.event[dataset.time == t].sum() / risk[dataset.time >= t].sum() for t in times
    ])
    return BaselineHazard(times, increments)

