"""Survival training losses on a vector of risk scores.

Both return ``(loss, d loss / d scores)`` and are computed in float64 with
softplus / log-sum-exp formulations so large score gaps do not overflow.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit

from ..exceptions import LengthMismatch, NoComparablePairs, NoEvents
from ..survival import SurvivalDataset

__all__ = ["pairwise_ranking_loss", "cox_npll_loss", "RankingLoss", "CoxLoss", "make_loss"]


def _scores(scores, dataset):
    scores = np.asarray(scores).ravel()
    if scores.dtype != np.longdouble:
        scores = scores.astype(np.float64)
    if scores.size != len(dataset):
        raise LengthMismatch(f"{scores.size} scores for {len(dataset)} patients")
    return scores


class RankingLoss:
    """``sum over comparable (i, j) of log(1 + exp(o_j - o_i))``.

    Pairs follow the C-index comparability rule: ``e_i`` observed and
    ``t_j > t_i``. The pair index is built once so repeated calls on the same
    patients (one per training step) stay cheap.
    """

    def __init__(self, dataset: SurvivalDataset):
        mask = dataset.event[:, None] & (dataset.time[None, :] > dataset.time[:, None])
        self.first, self.second = np.nonzero(mask)
        if self.first.size == 0:
            raise NoComparablePairs("ranking loss needs at least one comparable pair")
        self.n = len(dataset)
        self.dataset = dataset

    @property
    def n_terms(self) -> int:
        return self.first.size

    def __call__(self, scores):
        o = _scores(scores, self.dataset)
        margin = o[self.second] - o[self.first]
        loss = float(np.logaddexp(0.0, margin).sum())
        s = expit(margin)
        if s.dtype == np.float64:
            grad = np.bincount(self.second, s, self.n) - np.bincount(self.first, s, self.n)
        else:  # bincount would round extended-precision weights to float64
            grad = np.zeros(self.n, dtype=s.dtype)
            np.add.at(grad, self.second, s)
            np.subtract.at(grad, self.first, s)
        return loss, grad


class CoxLoss:
    """Negative Cox partial log-likelihood of the scores (Breslow ties)."""

    def __init__(self, dataset: SurvivalDataset):
        if dataset.n_events == 0:
            raise NoEvents("Cox loss needs at least one event")
        # at_risk[i, j]: patient j is in event patient i's risk set
        self.events = np.flatnonzero(dataset.event)
        self.at_risk = dataset.time[None, :] >= dataset.time[self.events, None]
        # patients outside every risk set must not even enter the stabilizing max
        self.members = self.at_risk.any(axis=0)
        self.dataset = dataset

    @property
    def n_terms(self) -> int:
        return self.events.size

    def __call__(self, scores):
        o = _scores(scores, self.dataset)
        m = o[self.members].max()
        w = np.where(self.members, np.exp(np.minimum(o - m, 0.0)), 0.0)
        risk_sums = self.at_risk @ w
        loss = float(np.sum(np.log(risk_sums) + m - o[self.events]))
        grad = w * ((1.0 / risk_sums) @ self.at_risk)
        grad[self.events] -= 1.0
        return loss, grad


def make_loss(kind: str, dataset: SurvivalDataset):
    if kind == "RANKING":
        return RankingLoss(dataset)
    if kind == "COX_NPLL":
        return CoxLoss(dataset)
    raise ValueError(f"unknown loss kind {kind!r}")


def pairwise_ranking_loss(scores, dataset: SurvivalDataset):
    """Pairwise logistic ranking loss and its gradient w.r.t. the scores."""
    return RankingLoss(dataset)(scores)


def cox_npll_loss(scores, dataset: SurvivalDataset):
    """Cox negative log partial likelihood and its gradient w.r.t. the scores."""
    return CoxLoss(dataset)(scores)
