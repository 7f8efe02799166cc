"""Gene-level TWAS statistic from weights, GWAS z-scores and LD."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np
from scipy.special import log_ndtr

from .ingest import Action, GeneWeightSet, GwasSummary, harmonize_snp
from .ld import LdMatrix

DENOMINATOR_FLOOR = 1e-8
DEGRADED_WEIGHT_FRACTION = 0.5
LN10 = math.log(10.0)

OK = "ok"
DEGRADED = "degraded"
NOT_TESTABLE = "not_testable"

LdSource = Union[LdMatrix, Callable[[Sequence[str]], LdMatrix]]


class DenominatorTooSmall(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


class NonFiniteZ(ValueError):
    pass


@dataclass(frozen=True)
class TwasResult:
    gene: str
    tissue: str
    chrom: int
    n_snps_used: int
    model: str
    z_twas: float | None
    p: float | None
    log10_p: float | None
    status: str
    pos: int | None = None
    # multiple-testing annotations, filled by mtp.adjust_per_tissue
    bonf_reject: bool | None = None
    bh_reject: bool | None = None
    bonf_threshold: float | None = None
    bh_kstar: int | None = None
    m_used: int | None = None

    @property
    def testable(self) -> bool:
        return self.status != NOT_TESTABLE


def twas_z(w: np.ndarray, z: np.ndarray, ld: LdMatrix | np.ndarray,
           floor: float = DENOMINATOR_FLOOR) -> float:
    """``w.z / sqrt(w' R w)``."""
    w = np.asarray(w, dtype=float)
    z = np.asarray(z, dtype=float)
    sigma = ld.values if isinstance(ld, LdMatrix) else np.asarray(ld, dtype=float)
    if w.ndim != 1 or w.shape != z.shape or sigma.shape != (w.size, w.size):
        raise DimensionMismatch(f"weights {w.shape}, z {z.shape}, LD {sigma.shape}")
    var = float(w @ sigma @ w)
    if not var >= floor:
        raise DenominatorTooSmall(f"w'Rw = {var:.3g} below {floor:g}")
    return float(w @ z) / math.sqrt(var)


def z_to_p(z: float) -> tuple[float, float]:
    """Two-sided normal p-value and its log10, evaluated in log space."""
    z = float(z)
    if not math.isfinite(z):
        raise NonFiniteZ(f"z = {z}")
    if z == 0.0:
        return 1.0, 0.0
    log_p = math.log(2.0) + float(log_ndtr(-abs(z)))
    log_p = min(log_p, 0.0)
    return math.exp(log_p), log_p / LN10


def _ld_for(source: LdSource, ids: Sequence[str]) -> LdMatrix:
    if isinstance(source, LdMatrix):
        return source.subset(ids)
    return source(ids)


def _available(source: LdSource, snp_id: str) -> bool:
    if isinstance(source, LdMatrix):
        return snp_id in source
    contains = getattr(source, "__contains__", None)
    return True if contains is None else snp_id in source


def run_gene(gws: GeneWeightSet, gwas: GwasSummary, ld_source: LdSource) -> TwasResult:
    """TWAS test for one weight set.

    Weight SNPs absent from the GWAS or the LD reference, or dropped by
    allele harmonization, are removed from both W and LD. Weights are not
    renormalized afterwards.
    """
    keep_ids: list[str] = []
    keep_w: list[float] = []
    keep_z: list[float] = []
    for snp, w in zip(gws.snps, gws.weights):
        if snp.id not in gwas or not _available(ld_source, snp.id):
            continue
        rec, z = gwas.lookup(snp.id)
        action = harmonize_snp(snp, rec).action
        if action is Action.KEEP:
            keep_z.append(z)
        elif action is Action.FLIP_SIGN:
            keep_z.append(-z)
        else:
            continue
        keep_ids.append(snp.id)
        keep_w.append(w)

    base = dict(gene=gws.gene, tissue=gws.tissue, chrom=gws.chrom, model=gws.model,
                pos=gws.tss, n_snps_used=len(keep_ids))
    if not keep_ids:
        return TwasResult(z_twas=None, p=None, log10_p=None, status=NOT_TESTABLE, **base)
    w = np.array(keep_w)
    try:
        z = twas_z(w, np.array(keep_z), _ld_for(ld_source, keep_ids))
    except DenominatorTooSmall:
        return TwasResult(z_twas=None, p=None, log10_p=None, status=NOT_TESTABLE, **base)
    total = float(np.abs(gws.weights).sum())
    lost = total - float(np.abs(w).sum())
    status = DEGRADED if lost > DEGRADED_WEIGHT_FRACTION * total else OK
    p, log10_p = z_to_p(z)
    return TwasResult(z_twas=z, p=p, log10_p=log10_p, status=status, **base)


def run_panel(panel: Sequence[GeneWeightSet], gwas: GwasSummary, ld_source: LdSource,
              threads: int = 1) -> list[TwasResult]:
    """Results in panel order; identical for any thread count."""
    if threads <= 1 or len(panel) < 2:
        return [run_gene(g, gwas, ld_source) for g in panel]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda g: run_gene(g, gwas, ld_source), panel))
