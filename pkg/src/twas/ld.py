"""SNP correlation (LD) matrices: estimation from a reference panel,
shrinkage toward the identity, and positive-definite solves."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import linalg

from .ingest import GenotypePanel, IngestError, emit, format_float

DEFAULT_LD_SHRINK = 0.1
SYMMETRY_TOL = 1e-12


class TooFewSamples(ValueError):
    pass


class EmptyPanel(ValueError):
    pass


class LambdaOutOfRange(ValueError):
    pass


class SingularMatrix(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class StandardizedGenotypes:
    matrix: np.ndarray
    snp_ids: tuple[str, ...]
    means: np.ndarray
    sds: np.ndarray
    excluded: tuple[str, ...] = ()

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


def standardize(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Center and scale columns to sample variance 1 (divisor n - 1).

    Returns ``(z, means, sds, keep)`` where ``keep`` masks the columns with
    nonzero variance; dropped columns are not present in ``z``.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    if n < 2:
        raise TooFewSamples(f"need at least 2 samples to standardize, got {n}")
    means = x.mean(axis=0)
    centered = x - means
    sds = np.sqrt((centered ** 2).sum(axis=0) / (n - 1))
    # relative floor so columns constant up to rounding count as constant
    scale = np.maximum(np.abs(means), 1.0)
    keep = sds > 1e-12 * scale
    z = centered[:, keep] / sds[keep]
    return z, means, sds, keep


def standardize_columns(panel: GenotypePanel) -> StandardizedGenotypes:
    z, means, sds, keep = standardize(panel.dosages)
    ids = np.array(panel.snp_ids, dtype=object)
    return StandardizedGenotypes(
        matrix=z,
        snp_ids=tuple(ids[keep]),
        means=means[keep],
        sds=sds[keep],
        excluded=tuple(ids[~keep]),
    )


@dataclass(frozen=True)
class LdMatrix:
    """Symmetric SNP correlation matrix with unit diagonal."""

    snp_ids: tuple[str, ...]
    values: np.ndarray
    shrinkage: float = 0.0
    index: Mapping[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        p = len(self.snp_ids)
        if v.shape != (p, p):
            raise ValueError(f"LD values shape {v.shape} does not match {p} SNP ids")
        if not np.all(np.isfinite(v)):
            raise ValueError("LD values must be finite")
        if p and np.max(np.abs(v - v.T)) > SYMMETRY_TOL:
            raise ValueError("LD matrix is not symmetric")
        if p and np.max(np.abs(np.diag(v) - 1.0)) > 1e-9:
            raise ValueError("LD matrix must have unit diagonal")
        if p and np.max(np.abs(v)) > 1.0 + 1e-9:
            raise ValueError("LD entries must lie in [-1, 1]")
        if not 0.0 <= self.shrinkage <= 1.0:
            raise LambdaOutOfRange(f"shrinkage {self.shrinkage} outside [0, 1]")
        v = (v + v.T) / 2.0
        np.fill_diagonal(v, 1.0)
        np.clip(v, -1.0, 1.0, out=v)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "snp_ids", tuple(self.snp_ids))
        index = {s: i for i, s in enumerate(self.snp_ids)}
        if len(index) != p:
            raise ValueError("duplicate SNP ids in LD matrix")
        object.__setattr__(self, "index", index)

    @property
    def p(self) -> int:
        return len(self.snp_ids)

    def __contains__(self, snp_id: str) -> bool:
        return snp_id in self.index

    def subset(self, ids: Sequence[str]) -> "LdMatrix":
        pos = [self.index[s] for s in ids]
        return LdMatrix(tuple(ids), self.values[np.ix_(pos, pos)], self.shrinkage)


def estimate_ld(std: StandardizedGenotypes) -> LdMatrix:
    x = std.matrix
    if x.shape[1] < 1:
        raise EmptyPanel("no SNP columns with nonzero variance")
    n = x.shape[0]
    values = x.T @ x / (n - 1)
    values = (values + values.T) / 2.0
    return LdMatrix(std.snp_ids, values, 0.0)


def ld_from_genotypes(dosages: np.ndarray, snp_ids: Sequence[str]) -> LdMatrix:
    z, means, sds, keep = standardize(dosages)
    ids = tuple(np.array(snp_ids, dtype=object)[keep])
    return estimate_ld(StandardizedGenotypes(z, ids, means[keep], sds[keep]))


def shrink_ld(ld: LdMatrix, lam: float) -> LdMatrix:
    """Convex shrink toward the identity: ``(1 - lam) * R + lam * I``.

    The recorded shrinkage composes, so shrinking twice by ``a`` then ``b``
    records ``1 - (1 - a)(1 - b)``.
    """
    if not 0.0 <= lam <= 1.0:
        raise LambdaOutOfRange(f"shrinkage lambda {lam} outside [0, 1]")
    if lam == 0.0:
        return ld
    values = (1.0 - lam) * ld.values
    np.fill_diagonal(values, 1.0)
    total = lam if ld.shrinkage == 0.0 else 1.0 - (1.0 - ld.shrinkage) * (1.0 - lam)
    return LdMatrix(ld.snp_ids, values, min(1.0, total))


def _factor(values: np.ndarray, shrinkage: float):
    try:
        return linalg.cho_factor(values, lower=True, check_finite=False)
    except linalg.LinAlgError:
        hint = " (apply shrinkage > 0)" if shrinkage == 0.0 else ""
        raise SingularMatrix(f"LD matrix is not positive definite{hint}") from None


def ld_solve(ld: LdMatrix | np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve ``R x = rhs`` by Cholesky with one step of iterative refinement."""
    if isinstance(ld, LdMatrix):
        values, lam = ld.values, ld.shrinkage
    else:
        values, lam = np.asarray(ld, dtype=float), 0.0
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape[0] != values.shape[0]:
        raise ValueError(f"rhs length {rhs.shape[0]} != LD dimension {values.shape[0]}")
    factor = _factor(values, lam)
    x = linalg.cho_solve(factor, rhs, check_finite=False)
    x += linalg.cho_solve(factor, rhs - values @ x, check_finite=False)
    if not np.all(np.isfinite(x)):
        raise SingularMatrix("LD solve produced non-finite values")
    return x


def quad_form(values: np.ndarray, w: np.ndarray) -> float:
    return float(w @ values @ w)


# ---------------------------------------------------------------------------
# LD TSV
# ---------------------------------------------------------------------------

def write_ld(ld: LdMatrix, path: str | Path) -> None:
    lines = ["\t".join(("SNP",) + ld.snp_ids)]
    for sid, row in zip(ld.snp_ids, ld.values):
        lines.append("\t".join([sid] + [format_float(v) for v in row]))
    emit("\n".join(lines) + "\n", path)


def read_ld(path: str | Path) -> LdMatrix:
    """Load a square LD TSV; the header and first column carry SNP ids."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\r\n") for ln in fh if ln.strip()]
    if not lines:
        raise IngestError("LD file is empty", path)
    ids = lines[0].split("\t")[1:]
    if len(lines) - 1 != len(ids):
        raise IngestError(f"LD matrix has {len(lines) - 1} rows for {len(ids)} columns", path)
    values = np.empty((len(ids), len(ids)))
    for i, line in enumerate(lines[1:]):
        fields = line.split("\t")
        if fields[0] != ids[i]:
            raise IngestError(f"row id {fields[0]!r} does not match column {ids[i]!r}",
                              path, i + 2)
        if len(fields) != len(ids) + 1:
            raise IngestError("ragged LD row", path, i + 2)
        values[i] = [float(v) for v in fields[1:]]
    try:
        return LdMatrix(tuple(ids), values, 0.0)
    except ValueError as exc:
        raise IngestError(str(exc), path) from None
