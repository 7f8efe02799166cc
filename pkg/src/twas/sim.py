"""Synthetic expression/trait data under the eight causal scenarios A-H, and a
suite measuring TWAS rejection rates on them.

Scenario parametrization (w = SNP->expression, b = expression->trait,
d = direct SNP->trait):

    A  w=0  b=0  d=0
    B  w    b=0  d=0
    C  w=0  b=0  d    on an independent block (no LD with the cis SNPs)
    D  w    b=0  d    on an independent block
    E  w    b    d=0
    F  w    b    d    on the eQTL SNPs
    G  w    b=0  d    on the eQTL SNPs (pleiotropy)
    H  w    b=0  d    on SNPs next to the eQTL SNPs (linkage)

A-D are null; E-H are expected to be detected.
"""

from __future__ import annotations

import dataclasses
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import norm

from .assoc import run_gene
from .ingest import GeneWeightSet, GenotypePanel, GwasSummary, SnpRecord, emit
from .ld import DEFAULT_LD_SHRINK, LdMatrix, ld_from_genotypes, shrink_ld
from .train import Candidate, TrainingSet, choose_fit, cross_validate

Z_CEILING = 40.0
LABELS = "ABCDEFGH"
NULL_LABELS = "ABCD"
INDEPENDENT_BLOCK = 5

# active effects per scenario: (w, b, d, where d acts)
_PATTERN = {
    "A": (False, False, False, None),
    "B": (True, False, False, None),
    "C": (False, False, True, "independent"),
    "D": (True, False, True, "independent"),
    "E": (True, True, False, None),
    "F": (True, True, True, "eqtl"),
    "G": (True, False, True, "eqtl"),
    "H": (True, False, True, "linked"),
}


class ParamOutOfRange(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioSpec:
    label: str
    n_expr: int = 500
    n_gwas: int = 2000
    p: int = 20
    rho: float = 0.8
    maf: float = 0.3
    w_effect: float = 0.5
    b_effect: float = 0.2
    d_effect: float = 0.15
    seed: int = 1

    def __post_init__(self):
        if self.label not in _PATTERN:
            raise ParamOutOfRange(f"scenario label {self.label!r} not in A-H")
        if self.n_expr < 10 or self.n_gwas < 3:
            raise ParamOutOfRange("n_expr must be >= 10 and n_gwas >= 3")
        if self.p < 4:
            raise ParamOutOfRange("need at least 4 cis SNPs")
        if not -1 < self.rho < 1:
            raise ParamOutOfRange(f"rho {self.rho} outside (-1, 1)")
        if not 0 < self.maf <= 0.5:
            raise ParamOutOfRange(f"maf {self.maf} outside (0, 0.5]")
        w, b, d, _ = _PATTERN[self.label]
        for name, active in (("w_effect", w), ("b_effect", b), ("d_effect", d)):
            if not active and getattr(self, name) != 0:
                raise ParamOutOfRange(f"scenario {self.label} requires {name} = 0")

    @property
    def is_null(self) -> bool:
        return self.label in NULL_LABELS

    @classmethod
    def strong(cls, label: str, **overrides) -> "ScenarioSpec":
        """Default strong-effect parameters with inactive effects zeroed."""
        w, b, d, _ = _PATTERN[label]
        base = {f.name: f.default for f in dataclasses.fields(cls) if f.name != "label"}
        if not w:
            base["w_effect"] = 0.0
        if not b:
            base["b_effect"] = 0.0
        if not d:
            base["d_effect"] = 0.0
        base.update(overrides)
        return cls(label, **base)


def parse_config(text: str) -> dict[str, str]:
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def spec_from_config(config: Mapping[str, str], label: str | None = None) -> ScenarioSpec:
    types = {f.name: f.type for f in dataclasses.fields(ScenarioSpec)}
    kwargs = {}
    for key, value in config.items():
        if key in ("label", "scenarios", "replicates", "alpha", "lambda_ld", "folds"):
            continue
        if key not in types:
            raise ValueError(f"unknown scenario parameter {key!r}")
        kwargs[key] = int(value) if types[key] in ("int", int) else float(value)
    return ScenarioSpec.strong(label or config["label"], **kwargs)


# ---------------------------------------------------------------------------
# genotypes
# ---------------------------------------------------------------------------

def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_dosages(n: int, p: int, rho: float, maf: float, seed) -> np.ndarray:
    """Dosage matrix from pairs of thresholded AR(1) Gaussian haplotypes."""
    if n < 1 or p < 1:
        raise ParamOutOfRange("n and p must be positive")
    if not -1 < rho < 1:
        raise ParamOutOfRange(f"rho {rho} outside (-1, 1)")
    if not 0 < maf <= 0.5:
        raise ParamOutOfRange(f"maf {maf} outside (0, 0.5]")
    rng = _rng(seed)
    e = rng.standard_normal((2 * n, p))
    h = np.empty_like(e)
    h[:, 0] = e[:, 0]
    s = math.sqrt(1.0 - rho * rho)
    for j in range(1, p):
        h[:, j] = rho * h[:, j - 1] + s * e[:, j]
    alleles = (h < norm.ppf(maf)).astype(float)
    return alleles[:n] + alleles[n:]


def synthetic_snps(p: int, chrom: int = 1, start: int = 1000, step: int = 1000,
                   prefix: str = "snp") -> tuple[SnpRecord, ...]:
    return tuple(SnpRecord(f"{prefix}{j + 1}", chrom, start + j * step, "A", "G")
                 for j in range(p))


def gen_genotypes(n: int, p: int, rho: float, maf: float, seed) -> GenotypePanel:
    snps = synthetic_snps(p)
    return GenotypePanel(tuple(f"I{i + 1}" for i in range(n)), tuple(s.id for s in snps),
                         sample_dosages(n, p, rho, maf, seed), snps)


# ---------------------------------------------------------------------------
# GWAS scan
# ---------------------------------------------------------------------------

def scan_z(x: np.ndarray, trait: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-column regression t statistics.

    Returns ``(z, monomorphic, saturated)``; monomorphic columns get z = 0 and
    |z| is capped at the ceiling.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(trait, dtype=float)
    n = x.shape[0]
    if y.shape != (n,):
        raise LengthMismatch(f"trait length {y.shape} != {n} individuals")
    if n < 3:
        raise ParamOutOfRange("need at least 3 individuals")
    xc = x - x.mean(axis=0)
    yc = y - y.mean()
    sxx = np.einsum("ij,ij->j", xc, xc)
    syy = float(yc @ yc)
    mono = sxx <= 1e-12 * np.maximum(1.0, np.abs(x.mean(axis=0))) ** 2
    r = np.zeros(x.shape[1])
    ok = ~mono
    if syy > 0:
        r[ok] = (xc[:, ok].T @ yc) / np.sqrt(sxx[ok] * syy)
    r = np.clip(r, -1.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = r * math.sqrt(n - 2) / np.sqrt(1.0 - r * r)
    saturated = ~np.isfinite(z) | (np.abs(z) > Z_CEILING)
    z = np.where(saturated, np.sign(r) * Z_CEILING, z)
    z[mono] = 0.0
    saturated &= ~mono
    return z, mono, saturated


def gwas_scan(panel: GenotypePanel, trait: np.ndarray) -> GwasSummary:
    z, mono, sat = scan_z(panel.dosages, trait)
    snps = panel.snps if panel.snps is not None else tuple(
        SnpRecord(s, 1, j + 1, "A", "G") for j, s in enumerate(panel.snp_ids))
    notes = {}
    for j, s in enumerate(panel.snp_ids):
        if mono[j]:
            notes[s] = "monomorphic"
        elif sat[j]:
            notes[s] = "saturated"
    if notes:
        warnings.warn(f"{len(notes)} SNPs flagged during GWAS scan "
                      f"({sum(v == 'saturated' for v in notes.values())} saturated)",
                      RuntimeWarning, stacklevel=2)
    return GwasSummary(snps, z, notes)


# ---------------------------------------------------------------------------
# scenarios
# ---------------------------------------------------------------------------

def eqtl_indices(p: int) -> np.ndarray:
    return np.unique([p // 4, (3 * p) // 4])


def linked_indices(p: int) -> np.ndarray:
    causal = set(eqtl_indices(p).tolist())
    out = []
    for j in sorted(causal):
        k = j + 1 if j + 1 < p and j + 1 not in causal else j - 1
        out.append(k)
    return np.array(out)


@dataclass(frozen=True)
class ScenarioData:
    spec: ScenarioSpec
    training: TrainingSet
    train_snps: tuple[SnpRecord, ...]
    snps: tuple[SnpRecord, ...]
    gwas: GwasSummary
    ld: LdMatrix
    truth: Mapping[str, object] = field(default_factory=dict)


def _standardized(x: np.ndarray) -> np.ndarray:
    xc = x - x.mean(axis=0)
    sd = xc.std(axis=0, ddof=1)
    return xc / np.where(sd > 0, sd, 1.0)


def _unit(v: np.ndarray) -> np.ndarray:
    sd = v.std(ddof=1)
    return (v - v.mean()) / (sd if sd > 0 else 1.0)


def replicate_seed(spec: ScenarioSpec, replicate: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([spec.seed, ord(spec.label), replicate])


def gen_scenario(spec: ScenarioSpec, replicate: int = 0) -> ScenarioData:
    """Expression cohort, independent GWAS cohort, and the GWAS LD reference."""
    use_w, use_b, use_d, d_site = _PATTERN[spec.label]
    ss_expr, ss_gwas, ss_block, ss_noise = replicate_seed(spec, replicate).spawn(4)
    noise = np.random.default_rng(ss_noise)
    p = spec.p
    snps = synthetic_snps(p)
    w = np.zeros(p)
    w[eqtl_indices(p)] = spec.w_effect

    x_e = sample_dosages(spec.n_expr, p, spec.rho, spec.maf, ss_expr)
    expr = _standardized(x_e) @ w + noise.standard_normal(spec.n_expr)
    training, keep = TrainingSet.from_raw(x_e, expr, f"sim{spec.label}", "sim")
    train_snps = tuple(s for s, k in zip(snps, keep) if k)

    x_g = sample_dosages(spec.n_gwas, p, spec.rho, spec.maf, ss_gwas)
    xs_g = _standardized(x_g)
    expr_g = xs_g @ w + noise.standard_normal(spec.n_gwas)
    trait = spec.b_effect * expr_g
    if use_d:
        d = np.zeros(p)
        if d_site == "independent":
            block = _standardized(sample_dosages(spec.n_gwas, INDEPENDENT_BLOCK, 0.0,
                                                 spec.maf, ss_block))
            trait = trait + block @ np.full(INDEPENDENT_BLOCK, spec.d_effect)
        else:
            d[eqtl_indices(p) if d_site == "eqtl" else linked_indices(p)] = spec.d_effect
            trait = trait + xs_g @ d
    trait = _unit(trait + noise.standard_normal(spec.n_gwas))
    z, _, _ = scan_z(x_g, trait)
    gwas = GwasSummary(snps, z)
    ld = ld_from_genotypes(x_g, [s.id for s in snps])
    truth = {"label": spec.label, "null": spec.is_null, "expected_detected": not spec.is_null,
             "eqtl": tuple(eqtl_indices(p).tolist()), "w": w}
    return ScenarioData(spec, training, train_snps, snps, gwas, ld, truth)


# ---------------------------------------------------------------------------
# suite
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioOutcome:
    label: str
    replicates: int
    tested: int
    rejection_rate: float
    mean_z: float
    var_z: float
    z: np.ndarray = field(repr=False, default_factory=lambda: np.empty(0))
    errors: int = 0


@dataclass(frozen=True)
class SuiteReport:
    rows: tuple[ScenarioOutcome, ...]

    def __getitem__(self, label: str) -> ScenarioOutcome:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)


def _one_replicate(spec: ScenarioSpec, replicate: int, fixed_weights, k: int,
                   grid, lambda_ld: float) -> float | None:
    data = gen_scenario(spec, replicate)
    if fixed_weights is not None:
        weights = np.asarray(fixed_weights, dtype=float)
        snps = data.snps
    else:
        report = cross_validate(data.training, k, replicate_seed(spec, replicate).spawn(5)[4],
                                grid, lambda_ld)
        best = choose_fit(report)
        if best is None:
            return None
        nz = np.flatnonzero(best.coefficients)
        weights = best.coefficients[nz]
        snps = tuple(data.train_snps[j] for j in nz)
    gws = GeneWeightSet(data.training.gene, "sim", 1, 1, snps, weights, "sim", math.nan)
    res = run_gene(gws, data.gwas, shrink_ld(data.ld, lambda_ld))
    return res.z_twas


def run_suite(specs: Iterable[ScenarioSpec], replicates: int, alpha: float = 0.05, *,
              threads: int = 1, fixed_weights: Sequence[float] | None = None,
              k: int = 5, grid: Sequence[Candidate] | None = None,
              lambda_ld: float = DEFAULT_LD_SHRINK) -> SuiteReport:
    """Rejection rate of |Z_TWAS| at level alpha per scenario.

    Weights are trained per replicate on the expression cohort (best CV model,
    no r^2 gate) unless ``fixed_weights`` is given. A replicate that raises is
    counted in ``errors`` and excluded from the rates.
    """
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    crit = float(norm.isf(alpha / 2))
    rows = []
    for spec in specs:
        def task(rep, spec=spec):
            try:
                return _one_replicate(spec, rep, fixed_weights, k, grid, lambda_ld), False
            except Exception:  # noqa: BLE001 - a failed replicate must not abort the suite
                return None, True

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                outcomes = list(pool.map(task, range(replicates)))
        else:
            outcomes = [task(r) for r in range(replicates)]
        z = np.array([v for v, _ in outcomes if v is not None], dtype=float)
        errors = sum(err for _, err in outcomes)
        tested = z.size
        rate = float(np.mean(np.abs(z) > crit)) if tested else math.nan
        mean = float(z.mean()) if tested else math.nan
        var = float(z.var(ddof=1)) if tested > 1 else math.nan
        rows.append(ScenarioOutcome(spec.label, replicates, tested, rate, mean, var, z, errors))
    return SuiteReport(tuple(rows))


SUITE_COLUMNS = ("SCENARIO", "REPLICATES", "REJECT_RATE", "MEAN_Z", "VAR_Z")


def write_suite(report: SuiteReport, path) -> None:
    lines = ["\t".join(SUITE_COLUMNS)]
    for r in report.rows:
        lines.append(f"{r.label}\t{r.replicates}\t{r.rejection_rate:.4f}\t"
                     f"{r.mean_z:.4f}\t{r.var_z:.4f}")
    emit("\n".join(lines) + "\n", path)


# ---------------------------------------------------------------------------
# multi-gene dataset for end-to-end runs
# ---------------------------------------------------------------------------

def write_dataset(out_dir, n_genes: int = 12, p: int = 10, n_expr: int = 200,
                  n_gwas: int = 1000, n_ref: int = 500, seed: int = 1,
                  labels: str = "ABEG", tissues: Sequence[str] = ("tissue1", "tissue2")) -> dict:
    """Write a small genome (one cis block per gene on chromosome 1) as TSV files.

    Gene g follows scenario ``labels[g % len(labels)]``; every gene is
    measured in each tissue with independent expression noise. Returns the
    written paths by role.
    """
    from .ingest import ExpressionRow, write_expression, write_genotypes, write_gwas, \
        write_snp_info

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    root = np.random.SeedSequence(seed)
    spacing = 2_000_000
    snps, x_e, x_g, x_r = [], [], [], []
    expr_rows = []
    trait = np.zeros(n_gwas)
    noise = np.random.default_rng(root.spawn(1)[0])
    for g in range(n_genes):
        label = labels[g % len(labels)]
        use_w, use_b, use_d, _ = _PATTERN[label]
        spec = ScenarioSpec.strong(label, p=p, n_expr=n_expr, n_gwas=n_gwas, seed=seed)
        ss = np.random.SeedSequence([seed, g, 7]).spawn(3)
        tss = spacing * (g + 1)
        block = tuple(SnpRecord(f"g{g + 1}_s{j + 1}", 1, tss + (j - p // 2) * 1000,
                                "A", "G") for j in range(p))
        snps.extend(block)
        xe = sample_dosages(n_expr, p, spec.rho, spec.maf, ss[0])
        xg = sample_dosages(n_gwas, p, spec.rho, spec.maf, ss[1])
        x_r.append(sample_dosages(n_ref, p, spec.rho, spec.maf, ss[2]))
        x_e.append(xe)
        x_g.append(xg)
        w = np.zeros(p)
        if use_w:
            w[eqtl_indices(p)] = spec.w_effect
        for t in tissues:
            expr = _standardized(xe) @ w + noise.standard_normal(n_expr)
            expr_rows.append(ExpressionRow(f"GENE{g + 1}", t, 1, tss, _unit(expr)))
        xs_g = _standardized(xg)
        if use_b:
            trait += spec.b_effect * (xs_g @ w + noise.standard_normal(n_gwas))
        if use_d:
            trait += xs_g[:, eqtl_indices(p)].sum(axis=1) * spec.d_effect
    trait = _unit(trait + noise.standard_normal(n_gwas))
    z, _, _ = scan_z(np.hstack(x_g), trait)

    snps = tuple(snps)
    ids = tuple(s.id for s in snps)
    expr_ids = tuple(f"E{i + 1}" for i in range(n_expr))
    paths = {k: out / v for k, v in {
        "genotypes": "expr_genotypes.tsv", "snp_info": "snp_info.tsv",
        "expression": "expression.tsv", "reference": "ref_genotypes.tsv",
        "gwas": "gwas.tsv"}.items()}
    write_genotypes(GenotypePanel(expr_ids, ids, np.hstack(x_e), snps), paths["genotypes"])
    write_genotypes(GenotypePanel(tuple(f"R{i + 1}" for i in range(n_ref)), ids,
                                  np.hstack(x_r), snps), paths["reference"])
    write_snp_info(snps, paths["snp_info"])
    write_expression(expr_ids, expr_rows, paths["expression"])
    write_gwas(GwasSummary(snps, z), paths["gwas"])
    return paths
