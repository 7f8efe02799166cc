"""Bonferroni and Benjamini-Hochberg multiple testing, optionally per tissue."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .assoc import TwasResult

BONFERRONI = "bonferroni"
BH = "bh"
GENOME_WIDE_M = 15000


class POutOfRange(ValueError):
    pass


class EmptyInput(ValueError):
    pass


@dataclass(frozen=True)
class AdjustmentOutcome:
    method: str
    alpha: float
    m: int
    threshold: float
    rejected: np.ndarray
    k_star: int | None = None


def _check(p, alpha: float, m: int | None) -> tuple[np.ndarray, int]:
    p = np.asarray(p, dtype=float).ravel()
    if p.size == 0:
        raise EmptyInput("no p-values supplied")
    if np.isnan(p).any() or (p < 0).any() or (p > 1).any():
        raise POutOfRange("p-values must lie in [0, 1]")
    if not 0 < alpha < 1:
        raise ValueError(f"alpha {alpha} outside (0, 1)")
    if m is None:
        m = p.size
    if m < p.size:
        raise ValueError(f"m = {m} is smaller than the {p.size} tests supplied")
    return p, int(m)


def bonferroni(p: Sequence[float], alpha: float = 0.05, m: int | None = None) -> AdjustmentOutcome:
    """Reject p_i <= alpha / m; ``m`` defaults to the number of p-values."""
    p, m = _check(p, alpha, m)
    threshold = alpha / m
    return AdjustmentOutcome(BONFERRONI, alpha, m, threshold, p <= threshold)


def bh_procedure(p: Sequence[float], alpha: float = 0.05, m: int | None = None) -> AdjustmentOutcome:
    """Benjamini-Hochberg step-up.

    Sort ascending (ties keep input order), find the largest rank k with
    P_(k) <= k * alpha / m, and reject the k smallest.
    """
    p, m = _check(p, alpha, m)
    order = np.argsort(p, kind="stable")
    crit = np.arange(1, p.size + 1) * alpha / m
    below = np.flatnonzero(p[order] <= crit)
    k_star = int(below[-1]) + 1 if below.size else 0
    rejected = np.zeros(p.size, dtype=bool)
    rejected[order[:k_star]] = True
    threshold = k_star * alpha / m
    return AdjustmentOutcome(BH, alpha, m, threshold, rejected, k_star)


def adjust(p: Sequence[float], method: str, alpha: float, m: int | None = None) -> AdjustmentOutcome:
    if method == BONFERRONI:
        return bonferroni(p, alpha, m)
    if method == BH:
        return bh_procedure(p, alpha, m)
    raise ValueError(f"unknown method {method!r}")


def adjust_per_tissue(results: Sequence[TwasResult], method: str | Sequence[str] = (BONFERRONI, BH),
                      alpha: float = 0.05, m_mode: str | int = "auto",
                      per_tissue: bool = True) -> list[TwasResult]:
    """Annotate results with rejection flags, grouping by tissue.

    ``m_mode`` is "auto" (m = testable results in the group) or a fixed
    integer. not_testable results get no flags and never count toward m.
    """
    methods = (method,) if isinstance(method, str) else tuple(method)
    fixed_m = None if m_mode == "auto" else int(m_mode)
    out = list(results)
    groups: dict[str, list[int]] = {}
    for i, r in enumerate(out):
        if r.testable:
            groups.setdefault(r.tissue if per_tissue else "", []).append(i)
    for idx in groups.values():
        p = [out[i].p for i in idx]
        m = fixed_m if fixed_m is not None else len(idx)
        for meth in methods:
            res = adjust(p, meth, alpha, m)
            for flag, i in zip(res.rejected, idx):
                if meth == BONFERRONI:
                    upd = dict(bonf_reject=bool(flag), bonf_threshold=res.threshold)
                else:
                    upd = dict(bh_reject=bool(flag), bh_kstar=res.k_star)
                out[i] = dataclasses.replace(out[i], m_used=res.m, **upd)
    return out
