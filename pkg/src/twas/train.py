"""Per-gene cis expression prediction models and cross-validated model choice.

Models are fit on standardized genotypes against standardized expression:

* ``top1``        single best eQTL (largest absolute correlation)
* ``ridge``       L2-penalized least squares (BLUP-equivalent fitted values)
* ``lasso``       L1-penalized least squares, coordinate descent
* ``elastic_net`` mixed penalty, coordinate descent
* ``marginal_ld`` eQTL covariances decorrelated by the shrunk LD matrix
"""

from __future__ import annotations

import enum
import math
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np
from scipy import linalg

from .ingest import GeneWeightSet, SnpRecord
from .ld import DEFAULT_LD_SHRINK, LdMatrix, ld_solve, standardize

DEFAULT_FOLDS = 5
DEFAULT_MIN_R2 = 0.01
DEFAULT_CIS_WINDOW = 500_000
DEFAULT_N_LAMBDA = 20
DEFAULT_LAMBDA_RATIO = 1e-3
DEFAULT_ENET_MIX = 0.5
CD_TOL = 1e-7
CD_MAX_SWEEPS = 10_000
KKT_TOL = 1e-7


class Kind(str, enum.Enum):
    TOP1 = "top1"
    RIDGE = "ridge"
    LASSO = "lasso"
    ELASTIC_NET = "elastic_net"
    MARGINAL_LD = "marginal_ld"


# earlier wins exact cv_r2 ties
TIE_ORDER = (Kind.ELASTIC_NET, Kind.LASSO, Kind.RIDGE, Kind.MARGINAL_LD, Kind.TOP1)


class TooFewSamples(ValueError):
    pass


class NoConvergence(RuntimeError):
    def __init__(self, sweeps: int, gap: float):
        super().__init__(f"coordinate descent did not converge after {sweeps} sweeps "
                         f"(last max coefficient change {gap:.3g})")
        self.sweeps = sweeps
        self.gap = gap


@dataclass(frozen=True)
class TrainingSet:
    x: np.ndarray
    y: np.ndarray
    gene: str = ""
    tissue: str = ""

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if x.ndim != 2 or x.shape[1] < 1:
            raise ValueError("x must be an n-by-p matrix with p >= 1")
        n = x.shape[0]
        if y.shape != (n,):
            raise ValueError("y length must equal the row count of x")
        if n < 2:
            raise TooFewSamples("need at least 2 samples")
        if abs(y.mean()) > 1e-9 or abs(y.var(ddof=1) - 1.0) > 1e-9:
            raise ValueError("y must be standardized (mean 0, sample variance 1)")
        if np.max(np.abs(x.mean(axis=0))) > 1e-9 or \
                np.max(np.abs(x.var(axis=0, ddof=1) - 1.0)) > 1e-9:
            raise ValueError("x columns must be standardized (mean 0, sample variance 1)")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @classmethod
    def from_raw(cls, genotypes: np.ndarray, expression: np.ndarray,
                 gene: str = "", tissue: str = "") -> tuple["TrainingSet", np.ndarray]:
        """Standardize raw dosages and expression.

        Returns the training set and the boolean mask of genotype columns kept
        (constant columns are dropped).
        """
        x, _, _, keep = standardize(genotypes)
        y = np.asarray(expression, dtype=float)
        sd = y.std(ddof=1)
        if not sd > 0:
            raise ValueError(f"{gene}: expression has zero variance")
        return cls(x, (y - y.mean()) / sd, gene, tissue), keep


@dataclass(frozen=True)
class ModelFit:
    kind: Kind
    coefficients: np.ndarray
    penalty: float = 0.0
    mix: float = 0.0
    cv_r2: float = math.nan
    sweeps: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        coef = np.asarray(self.coefficients, dtype=float)
        object.__setattr__(self, "coefficients", coef)
        if self.kind is Kind.TOP1 and np.count_nonzero(coef) > 1:
            raise ValueError("top1 fit must have at most one nonzero coefficient")
        if self.cv_r2 > 1.0:
            raise ValueError("cv_r2 cannot exceed 1")


@dataclass(frozen=True)
class EqtlCovariances:
    values: np.ndarray

    @classmethod
    def from_training_set(cls, ts: TrainingSet) -> "EqtlCovariances":
        return cls(ts.x.T @ ts.y / (ts.n - 1))


# ---------------------------------------------------------------------------
# coordinate descent kernel
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _soft(z, t):
    if z > t:
        return z - t
    if z < -t:
        return z + t
    return 0.0


@numba.njit(cache=True)
def _gradient(gram, c, beta, grad):
    p = c.shape[0]
    for j in range(p):
        s = c[j]
        for k in range(p):
            s -= gram[j, k] * beta[k]
        grad[j] = s


@numba.njit(cache=True)
def _objective(gram, c, yy, beta, l1, l2):
    p = c.shape[0]
    quad = 0.0
    lin = 0.0
    pen1 = 0.0
    pen2 = 0.0
    for j in range(p):
        s = 0.0
        for k in range(p):
            s += gram[j, k] * beta[k]
        quad += beta[j] * s
        lin += c[j] * beta[j]
        pen1 += abs(beta[j])
        pen2 += beta[j] * beta[j]
    return 0.5 * quad - lin + 0.5 * yy + l1 * pen1 + 0.5 * l2 * pen2


@numba.njit(cache=True)
def _kkt_residual(grad, beta, l1, l2):
    worst = 0.0
    for j in range(beta.shape[0]):
        g = grad[j] - l2 * beta[j]
        if beta[j] == 0.0:
            r = abs(g) - l1
            if r < 0.0:
                r = 0.0
        elif beta[j] > 0.0:
            r = abs(g - l1)
        else:
            r = abs(g + l1)
        if r > worst:
            worst = r
    return worst


@numba.njit(cache=True)
def _cd_kernel(gram, c, yy, beta, l1, l2, tol, kkt_tol, max_sweeps, objective):
    """Cyclic coordinate descent on 0.5 b'Gb - c'b + l1|b|_1 + l2/2 |b|^2.

    ``beta`` is updated in place. ``objective`` (length max_sweeps + 1, or
    length 0 to skip) receives the objective before and after every sweep.
    Returns (sweeps, last max change, KKT residual, converged flag).
    """
    p = c.shape[0]
    grad = np.empty(p)
    _gradient(gram, c, beta, grad)
    record = objective.shape[0] > 0
    if record:
        objective[0] = _objective(gram, c, yy, beta, l1, l2)
    sweeps = 0
    max_delta = 0.0
    kkt = np.inf
    while sweeps < max_sweeps:
        max_delta = 0.0
        for j in range(p):
            denom = gram[j, j] + l2
            if denom <= 0.0:
                new = 0.0
            else:
                new = _soft(grad[j] + gram[j, j] * beta[j], l1) / denom
            d = new - beta[j]
            if d != 0.0:
                beta[j] = new
                for k in range(p):
                    grad[k] -= d * gram[k, j]
                if abs(d) > max_delta:
                    max_delta = abs(d)
        sweeps += 1
        if record:
            objective[sweeps] = _objective(gram, c, yy, beta, l1, l2)
        if max_delta <= tol:
            _gradient(gram, c, beta, grad)
            kkt = _kkt_residual(grad, beta, l1, l2)
            if kkt <= kkt_tol:
                return sweeps, max_delta, kkt, True
    _gradient(gram, c, beta, grad)
    kkt = _kkt_residual(grad, beta, l1, l2)
    return sweeps, max_delta, kkt, False


def coordinate_descent(gram: np.ndarray, c: np.ndarray, lam: float, mix: float, *,
                       yy: float = 0.0, beta0: np.ndarray | None = None,
                       tol: float = CD_TOL, max_sweeps: int = CD_MAX_SWEEPS,
                       trace: list | None = None) -> tuple[np.ndarray, int, float]:
    """Elastic-net minimizer in covariance form.

    ``gram = X'X/n``, ``c = X'y/n`` and ``yy = y'y/n``. Returns
    ``(beta, sweeps, kkt_residual)``. If ``trace`` is a list, the objective
    value before the first sweep and after every sweep is appended to it.
    """
    if lam < 0:
        raise ValueError("penalty must be >= 0")
    if not 0.0 <= mix <= 1.0:
        raise ValueError("mix must lie in [0, 1]")
    gram = np.ascontiguousarray(gram, dtype=float)
    c = np.ascontiguousarray(c, dtype=float)
    beta = np.zeros(c.shape[0]) if beta0 is None else np.array(beta0, dtype=float)
    objective = np.empty(max_sweeps + 1 if trace is not None else 0)
    sweeps, gap, kkt, ok = _cd_kernel(gram, c, float(yy), beta, lam * mix, lam * (1.0 - mix),
                                      tol, KKT_TOL, max_sweeps, objective)
    if trace is not None:
        trace.extend(objective[:sweeps + 1].tolist())
    if not ok:
        raise NoConvergence(sweeps, gap)
    return beta, sweeps, kkt


# ---------------------------------------------------------------------------
# single fits on a TrainingSet
# ---------------------------------------------------------------------------

def _top1_arrays(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    xy = x.T @ y
    xx = np.einsum("ij,ij->j", x, x)
    score = np.zeros_like(xy)
    ok = xx > 0
    score[ok] = np.abs(xy[ok]) / np.sqrt(xx[ok])
    coef = np.zeros(x.shape[1])
    j = int(np.argmax(score))
    if ok[j]:
        coef[j] = xy[j] / xx[j]
    return coef


def fit_top1(ts: TrainingSet) -> ModelFit:
    """Best single cis-eQTL; on standardized data the slope equals the correlation."""
    return ModelFit(Kind.TOP1, _top1_arrays(ts.x, ts.y))


def _ridge_arrays(x: np.ndarray, y: np.ndarray, lam: float) -> np.ndarray:
    n, p = x.shape
    a = x.T @ x / n + lam * np.eye(p)
    return linalg.solve(a, x.T @ y / n, assume_a="pos")


def fit_ridge(ts: TrainingSet, lam: float) -> ModelFit:
    if not lam > 0:
        raise ValueError("ridge penalty must be > 0")
    return ModelFit(Kind.RIDGE, _ridge_arrays(ts.x, ts.y, lam), penalty=lam)


def fit_elastic_net(ts: TrainingSet, lam: float, mix: float, *,
                    trace: list | None = None, max_sweeps: int = CD_MAX_SWEEPS) -> ModelFit:
    """Minimize (1/2n)|y - Xb|^2 + lam * (mix |b|_1 + (1 - mix)/2 |b|^2).

    Raises NoConvergence if the largest coefficient change per sweep is still
    above 1e-7 after ``max_sweeps`` sweeps.
    """
    n = ts.n
    gram = ts.x.T @ ts.x / n
    c = ts.x.T @ ts.y / n
    beta, sweeps, _ = coordinate_descent(gram, c, lam, mix, yy=float(ts.y @ ts.y) / n,
                                         trace=trace, max_sweeps=max_sweeps)
    kind = Kind.LASSO if mix == 1.0 else Kind.ELASTIC_NET
    return ModelFit(kind, beta, penalty=lam, mix=mix, sweeps=sweeps)


def elastic_net_objective(x: np.ndarray, y: np.ndarray, beta: np.ndarray,
                          lam: float, mix: float) -> float:
    r = y - x @ beta
    return float(r @ r / (2 * len(y))
                 + lam * (mix * np.abs(beta).sum() + (1 - mix) / 2 * beta @ beta))


def marginal_ld_weights(cov: EqtlCovariances, ld: LdMatrix) -> ModelFit:
    """Weights W solving R W = cov, i.e. eQTL covariances times the inverse LD."""
    w = ld_solve(ld, np.asarray(cov.values, dtype=float))
    return ModelFit(Kind.MARGINAL_LD, w, penalty=ld.shrinkage)


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Candidate:
    """One model family in the CV grid; ``penalties=None`` means the default path."""

    kind: Kind
    mix: float = 0.0
    penalties: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.penalties is not None:
            object.__setattr__(self, "penalties", tuple(float(v) for v in self.penalties))


def default_grid(enet_mix: float = DEFAULT_ENET_MIX) -> tuple[Candidate, ...]:
    return (
        Candidate(Kind.TOP1),
        Candidate(Kind.RIDGE),
        Candidate(Kind.LASSO, mix=1.0),
        Candidate(Kind.ELASTIC_NET, mix=enet_mix),
        Candidate(Kind.MARGINAL_LD),
    )


def lambda_path(x: np.ndarray, y: np.ndarray, n_lambda: int = DEFAULT_N_LAMBDA,
                ratio: float = DEFAULT_LAMBDA_RATIO) -> np.ndarray:
    """Log-spaced penalties from max_j |x_j'y|/n down to ratio times that."""
    lam_max = float(np.max(np.abs(x.T @ y))) / x.shape[0]
    if not lam_max > 0:
        lam_max = 1.0
    return lam_max * ratio ** np.linspace(0.0, 1.0, n_lambda)


def fold_assignment(n: int, k: int, seed) -> np.ndarray:
    """Fold label per individual: position in a seeded permutation, mod k."""
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.empty(n, dtype=np.int64)
    folds[perm] = np.arange(n) % k
    return folds


@numba.njit(cache=True)
def _cd_path(gram, c, yy, lambdas, mix, tol, kkt_tol, max_sweeps):
    """Warm-started coordinate descent along a decreasing penalty path.

    Returns (coefficient rows, index of the first non-converged penalty or -1).
    """
    p = c.shape[0]
    out = np.zeros((lambdas.shape[0], p))
    beta = np.zeros(p)
    for i in range(lambdas.shape[0]):
        lam = lambdas[i]
        if not _cd_active(gram, c, beta, lam * mix, lam * (1.0 - mix),
                          tol, kkt_tol, max_sweeps):
            return out, i
        out[i] = beta
    return out, -1


@numba.njit(cache=True)
def _polish(gram, c, beta, active, na, l1, l2):
    """Jump to the exact minimizer on the active set with its signs held fixed.

    Solves (G_AA + l2 I) b = c_A - l1 sign(beta_A) by Cholesky. ``beta`` is
    only overwritten, and True returned, if no coefficient changes sign.
    """
    a = np.empty((na, na))
    b = np.empty(na)
    for r in range(na):
        i = active[r]
        for s in range(na):
            a[r, s] = gram[i, active[s]]
        a[r, r] += l2
        b[r] = c[i] - (l1 if beta[i] > 0.0 else -l1)
    for r in range(na):
        d = a[r, r]
        for s in range(r):
            d -= a[r, s] * a[r, s]
        if d <= 1e-10:
            return False
        a[r, r] = np.sqrt(d)
        for t in range(r + 1, na):
            v = a[t, r]
            for s in range(r):
                v -= a[t, s] * a[r, s]
            a[t, r] = v / a[r, r]
    for r in range(na):
        v = b[r]
        for s in range(r):
            v -= a[r, s] * b[s]
        b[r] = v / a[r, r]
    for r in range(na - 1, -1, -1):
        v = b[r]
        for s in range(r + 1, na):
            v -= a[s, r] * b[s]
        b[r] = v / a[r, r]
    for r in range(na):
        if b[r] * beta[active[r]] <= 0.0:
            return False
    for r in range(na):
        beta[active[r]] = b[r]
    return True


@numba.njit(cache=True)
def _cd_active(gram, c, beta, l1, l2, tol, kkt_tol, max_sweeps):
    """Coordinate descent that iterates on the nonzero set between full sweeps.

    After each full sweep the active set is first tried with an exact solve
    (see ``_polish``). Convergence is only declared after a full sweep whose largest change is
    within ``tol`` and whose KKT residual is within ``kkt_tol``.
    """
    p = c.shape[0]
    grad = np.empty(p)
    _gradient(gram, c, beta, grad)
    active = np.empty(p, dtype=np.int64)
    sweeps = 0
    while sweeps < max_sweeps:
        # full sweep
        max_delta = 0.0
        for j in range(p):
            new = _soft(grad[j] + gram[j, j] * beta[j], l1) / (gram[j, j] + l2)
            d = new - beta[j]
            if d != 0.0:
                beta[j] = new
                for k in range(p):
                    grad[k] -= d * gram[k, j]
                if abs(d) > max_delta:
                    max_delta = abs(d)
        sweeps += 1
        if max_delta <= tol:
            _gradient(gram, c, beta, grad)
            if _kkt_residual(grad, beta, l1, l2) <= kkt_tol:
                return True
        # sweeps restricted to the current nonzero set
        na = 0
        for j in range(p):
            if beta[j] != 0.0:
                active[na] = j
                na += 1
        if na > 0 and _polish(gram, c, beta, active, na, l1, l2):
            _gradient(gram, c, beta, grad)
            continue
        while sweeps < max_sweeps:
            max_delta = 0.0
            for a in range(na):
                j = active[a]
                new = _soft(grad[j] + gram[j, j] * beta[j], l1) / (gram[j, j] + l2)
                d = new - beta[j]
                if d != 0.0:
                    beta[j] = new
                    for k in range(p):
                        grad[k] -= d * gram[k, j]
                    if abs(d) > max_delta:
                        max_delta = abs(d)
            sweeps += 1
            if max_delta <= tol:
                break
    return False


@numba.njit(cache=True)
def _prepare(x, y):
    n, p = x.shape
    means = np.zeros(p)
    for i in range(n):
        for j in range(p):
            means[j] += x[i, j]
    means /= n
    sds = np.zeros(p)
    for i in range(n):
        for j in range(p):
            d = x[i, j] - means[j]
            sds[j] += d * d
    sds = np.sqrt(sds / (n - 1))
    keep = sds > 1e-12
    cols = np.flatnonzero(keep)
    z = np.empty((n, cols.shape[0]))
    for i in range(n):
        for a in range(cols.shape[0]):
            j = cols[a]
            z[i, a] = (x[i, j] - means[j]) / sds[j]
    ybar = y.mean()
    yc = y - ybar
    gram = z.T @ z / n
    c = z.T @ yc / n
    scale = np.where(keep, sds, 1.0)
    return z, yc, means, scale, keep, ybar, gram, c, (yc * yc).sum() / n


@numba.njit(cache=True)
def _ridge_rows(gram, c, lambdas):
    evals, evecs = np.linalg.eigh(gram)
    proj = evecs.T @ c
    out = np.empty((lambdas.shape[0], c.shape[0]))
    for i in range(lambdas.shape[0]):
        out[i] = evecs @ (proj / (evals + lambdas[i]))
    return out


class _Prepared:
    """Training-fold data standardized once and shared by every model family."""

    __slots__ = ("z", "yc", "means", "scale", "keep", "ybar", "gram", "c", "yy", "n")

    def __init__(self, x: np.ndarray, y: np.ndarray):
        (self.z, self.yc, self.means, self.scale, self.keep, ybar, self.gram,
         self.c, yy) = _prepare(np.ascontiguousarray(x), np.ascontiguousarray(y))
        self.ybar = float(ybar)
        self.yy = float(yy)
        self.n = x.shape[0]

    def rows(self, cand: Candidate, lambdas: np.ndarray, lambda_ld: float) -> np.ndarray:
        """Coefficient rows (standardized units) for each penalty."""
        n, p = self.z.shape
        if cand.kind is Kind.TOP1:
            return _top1_arrays(self.z, self.yc)[None, :]
        if cand.kind is Kind.MARGINAL_LD:
            # same matrix as shrink_ld on the fold's LD, without the id bookkeeping
            corr = np.clip(self.gram * (n / (n - 1)), -1.0, 1.0)
            corr = (1.0 - lambda_ld) * (corr + corr.T) / 2
            np.fill_diagonal(corr, 1.0)
            return ld_solve(corr, self.c * (n / (n - 1)))[None, :]
        if cand.kind is Kind.RIDGE:
            return _ridge_rows(self.gram, self.c, np.ascontiguousarray(lambdas, dtype=float))
        rows, failed = _cd_path(self.gram, self.c, self.yy, np.ascontiguousarray(lambdas),
                                cand.mix, CD_TOL, KKT_TOL, CD_MAX_SWEEPS)
        if failed >= 0:
            raise NoConvergence(CD_MAX_SWEEPS, math.nan)
        return rows

    def original_units(self, beta: np.ndarray) -> tuple[np.ndarray, float]:
        coef = np.zeros(self.keep.shape[0])
        coef[self.keep] = beta / self.scale[self.keep]
        return coef, self.ybar - float(self.means[self.keep] @ coef[self.keep])


@numba.njit(cache=True)
def _held_out(x, y, folds, f):
    """Standardize inner fold ``f`` and its held-out rows in the training units.

    Returns (gram, c, yy, held-out z, held-out centred y); z has zero columns
    if every training column is constant.
    """
    tr = np.flatnonzero(folds != f)
    te = np.flatnonzero(folds == f)
    z, yc, means, scale, keep, ybar, gram, c, yy = _prepare(x[tr], y[tr])
    cols = np.flatnonzero(keep)
    z_te = np.empty((te.shape[0], cols.shape[0]))
    y_te = np.empty(te.shape[0])
    for r in range(te.shape[0]):
        y_te[r] = y[te[r]] - ybar
        for a in range(cols.shape[0]):
            j = cols[a]
            z_te[r, a] = (x[te[r], j] - means[j]) / scale[j]
    return gram, c, yy, z_te, y_te


@numba.njit(cache=True)
def _fold_sse(gram, c, yy, z_te, y_te, lambdas, mix, ridge, tol, kkt_tol, max_sweeps):
    """Held-out squared error per penalty for one inner fold, plus a converged flag."""
    sse = np.zeros(lambdas.shape[0])
    if z_te.shape[1] == 0:
        sse += (y_te * y_te).sum()
        return sse, True
    if ridge:
        rows = _ridge_rows(gram, c, lambdas)
    else:
        rows, failed = _cd_path(gram, c, yy, lambdas, mix, tol, kkt_tol, max_sweeps)
        if failed >= 0:
            return sse, False
    pred = z_te @ rows.T
    for r in range(y_te.shape[0]):
        for l in range(lambdas.shape[0]):
            d = y_te[r] - pred[r, l]
            sse[l] += d * d
    return sse, True


class _FoldPlan:
    """A training set plus the inner folds used to tune penalties on it."""

    def __init__(self, x: np.ndarray, y: np.ndarray, k_inner: int, seed):
        self.x = np.ascontiguousarray(x)
        self.y = np.ascontiguousarray(y)
        self.full = _Prepared(x, y)
        folds = fold_assignment(x.shape[0], k_inner, seed)
        self.inner = [_held_out(self.x, self.y, folds, f) for f in range(k_inner)]

    def fit(self, cand: Candidate, lambda_ld: float) -> tuple[np.ndarray, float, float]:
        """Coefficients (columns of x), intercept and chosen penalty."""
        full = self.full
        if full.z.shape[1] == 0:
            return np.zeros(self.x.shape[1]), full.ybar, 0.0
        penalized = cand.kind in (Kind.RIDGE, Kind.LASSO, Kind.ELASTIC_NET)
        if not penalized:
            lam = lambda_ld if cand.kind is Kind.MARGINAL_LD else 0.0
            coef, b0 = full.original_units(full.rows(cand, np.array([lam]), lambda_ld)[0])
            return coef, b0, lam
        lambdas = (np.array(cand.penalties, dtype=float) if cand.penalties is not None
                   else lambda_path(full.z, full.yc))
        chosen = 0
        if len(lambdas) > 1:
            sse = np.zeros(len(lambdas))
            for fold in self.inner:
                part, ok = _fold_sse(*fold, lambdas, cand.mix, cand.kind is Kind.RIDGE,
                                     CD_TOL, KKT_TOL, CD_MAX_SWEEPS)
                if not ok:
                    raise NoConvergence(CD_MAX_SWEEPS, math.nan)
                sse += part
            chosen = int(np.argmin(sse))
        # warm-started paths only need to reach the chosen penalty
        path = lambdas[[chosen]] if cand.kind is Kind.RIDGE else lambdas[:chosen + 1]
        rows = full.rows(cand, path, lambda_ld)
        coef, b0 = full.original_units(rows[-1])
        return coef, b0, float(lambdas[chosen])


@dataclass(frozen=True)
class CvReport:
    gene: str
    tissue: str
    folds: np.ndarray
    fits: tuple[ModelFit, ...] = field(default_factory=tuple)

    def by_kind(self) -> dict[Kind, ModelFit]:
        return {f.kind: f for f in self.fits}


def _inner_folds(n_train: int, k: int) -> int:
    return max(2, min(k, n_train // 2))


def cross_validate(ts: TrainingSet, k: int = DEFAULT_FOLDS, seed=0,
                   grid: Sequence[Candidate] | None = None,
                   lambda_ld: float = DEFAULT_LD_SHRINK) -> CvReport:
    """k-fold CV r^2 per model family, with penalties tuned inside each training fold.

    Each returned ModelFit holds the cv_r2 from held-out predictions and the
    coefficients refit on the full training set (penalty again tuned by an
    inner CV on all samples).
    """
    if k < 2:
        raise ValueError("need at least 2 folds")
    n = ts.n
    if n < 2 * k:
        raise TooFewSamples(f"{ts.gene}: {n} samples is fewer than 2 x {k} folds")
    grid = tuple(grid) if grid is not None else default_grid()
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    fold_seed, *inner_seeds = ss.spawn(k + 2)
    folds = fold_assignment(n, k, fold_seed)
    x, y = ts.x, ts.y
    plans = []
    for f in range(k):
        tr = folds != f
        plans.append((~tr, _FoldPlan(x[tr], y[tr], _inner_folds(int(tr.sum()), k),
                                     inner_seeds[f])))
    whole = _FoldPlan(x, y, _inner_folds(n, k), inner_seeds[k])
    ss_tot = float(((y - y.mean()) ** 2).sum())
    fits = []
    for cand in grid:
        pred = np.empty(n)
        for te, plan in plans:
            coef, b0, _ = plan.fit(cand, lambda_ld)
            pred[te] = x[te] @ coef + b0
        cv_r2 = 1.0 - float(((y - pred) ** 2).sum()) / ss_tot
        coef, _, lam = whole.fit(cand, lambda_ld)
        fits.append(ModelFit(cand.kind, coef, penalty=lam, mix=cand.mix, cv_r2=cv_r2))
    return CvReport(ts.gene, ts.tissue, folds, tuple(fits))


# ---------------------------------------------------------------------------
# selection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Skipped:
    gene: str
    tissue: str
    reason: str


def choose_fit(report: CvReport) -> ModelFit | None:
    """Highest cv_r2 among fits with a nonzero coefficient; ties by TIE_ORDER."""
    usable = [f for f in report.fits if np.any(f.coefficients != 0) and math.isfinite(f.cv_r2)]
    if not usable:
        return None
    rank = {k: i for i, k in enumerate(TIE_ORDER)}
    return min(usable, key=lambda f: (-f.cv_r2, rank[f.kind]))


def select_model(report: CvReport, min_r2: float = DEFAULT_MIN_R2, *,
                 snps: Sequence[SnpRecord] | None = None, chrom: int = 1,
                 tss: int = 1) -> GeneWeightSet | Skipped:
    """Turn the CV report into a weight set, or Skipped if nothing clears ``min_r2``.

    Only nonzero weights are kept in the returned set.
    """
    if not report.fits:
        raise ValueError("empty CV report")
    best = choose_fit(report)
    if best is None:
        return Skipped(report.gene, report.tissue, "no model produced a nonzero weight")
    if best.cv_r2 <= min_r2:
        return Skipped(report.gene, report.tissue,
                       f"best cv_r2 {best.cv_r2:.4g} ({best.kind.value}) <= min_r2 {min_r2:g}")
    coef = best.coefficients
    if snps is None:
        snps = [SnpRecord(f"snp{j}", chrom, j + 1, "A", "G") for j in range(len(coef))]
    if len(snps) != len(coef):
        raise ValueError("SNP list length does not match coefficient count")
    nz = np.flatnonzero(coef)
    return GeneWeightSet(report.gene, report.tissue, chrom, tss,
                         tuple(snps[j] for j in nz), coef[nz], best.kind.value, best.cv_r2)


def gene_seed(gene: str, tissue: str, seed: int) -> np.random.SeedSequence:
    """Per-gene RNG seed, stable across processes and schedules."""
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF,
                                   zlib.crc32(f"{gene}\t{tissue}".encode())])


def cis_indices(snps: Sequence[SnpRecord], chrom: int, tss: int,
                window: int = DEFAULT_CIS_WINDOW) -> np.ndarray:
    return np.array([j for j, s in enumerate(snps)
                     if s.chrom == chrom and abs(s.pos - tss) <= window], dtype=np.int64)


def train_gene(ts: TrainingSet, snps: Sequence[SnpRecord], *, chrom: int, tss: int,
               k: int = DEFAULT_FOLDS, seed: int = 0, min_r2: float = DEFAULT_MIN_R2,
               grid: Sequence[Candidate] | None = None,
               lambda_ld: float = DEFAULT_LD_SHRINK) -> tuple[CvReport, GeneWeightSet | Skipped]:
    report = cross_validate(ts, k, gene_seed(ts.gene, ts.tissue, seed), grid, lambda_ld)
    return report, select_model(report, min_r2, snps=snps, chrom=chrom, tss=tss)


LOG_COLUMNS = ("GENE", "TISSUE", "MODEL", "LAMBDA", "CVR2", "SELECTED")


@dataclass(frozen=True)
class GeneOutcome:
    gene: str
    tissue: str
    result: GeneWeightSet | Skipped
    report: CvReport | None = None

    def log_rows(self) -> list[tuple[str, ...]]:
        if self.report is None:
            reason = self.result.reason if isinstance(self.result, Skipped) else ""
            return [(self.gene, self.tissue, "NA", "NA", "NA", f"0:{reason}")]
        chosen = self.result.model if isinstance(self.result, GeneWeightSet) else None
        return [(self.gene, self.tissue, f.kind.value, f"{f.penalty:.6g}", f"{f.cv_r2:.6g}",
                 "1" if f.kind.value == chosen else "0") for f in self.report.fits]


def train_panel(panel, expression_samples: Sequence[str], expression_rows, *,
                k: int = DEFAULT_FOLDS, seed: int = 0, min_r2: float = DEFAULT_MIN_R2,
                window: int = DEFAULT_CIS_WINDOW, lambda_ld: float = DEFAULT_LD_SHRINK,
                grid: Sequence[Candidate] | None = None, threads: int = 1) -> list[GeneOutcome]:
    """Train every expression row against its cis SNPs in ``panel``.

    Output order follows ``expression_rows`` and does not depend on ``threads``.
    """
    if panel.snps is None:
        raise ValueError("genotype panel needs SNP info (CHR/BP/alleles) for cis windows")
    pos = {s: i for i, s in enumerate(panel.sample_ids)}
    missing = [s for s in expression_samples if s not in pos]
    if missing:
        raise ValueError(f"{len(missing)} expression samples lack genotypes "
                         f"(first: {missing[0]!r})")
    dosages = panel.dosages[[pos[s] for s in expression_samples]]

    def one(row) -> GeneOutcome:
        cis = cis_indices(panel.snps, row.chrom, row.tss, window)
        if cis.size == 0:
            return GeneOutcome(row.gene, row.tissue,
                               Skipped(row.gene, row.tissue, "no cis SNPs"))
        if len(expression_samples) < 2 * k:
            return GeneOutcome(row.gene, row.tissue,
                               Skipped(row.gene, row.tissue, "too few samples for CV"))
        try:
            ts, keep = TrainingSet.from_raw(dosages[:, cis], row.values, row.gene, row.tissue)
        except ValueError as exc:
            return GeneOutcome(row.gene, row.tissue, Skipped(row.gene, row.tissue, str(exc)))
        snps = [panel.snps[j] for j, kept in zip(cis, keep) if kept]
        report, result = train_gene(ts, snps, chrom=row.chrom, tss=row.tss, k=k, seed=seed,
                                    min_r2=min_r2, grid=grid, lambda_ld=lambda_ld)
        return GeneOutcome(row.gene, row.tissue, result, report)

    rows = list(expression_rows)
    if threads <= 1:
        return [one(r) for r in rows]
    from concurrent.futures import ThreadPoolExecutor
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, rows))
