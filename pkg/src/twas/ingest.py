"""Readers and writers for GWAS summaries, genotype panels and weight panels,
plus allele harmonization between data sources.

All files are tab-separated with a mandatory header row.
"""

from __future__ import annotations

import enum
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

BASES = frozenset("ACGT")
AMBIGUOUS_PAIRS = frozenset({("A", "T"), ("T", "A"), ("C", "G"), ("G", "C")})
MISSING_TOKENS = frozenset({"", "NA", "NaN", "nan", "."})

GWAS_COLUMNS = ("SNP", "CHR", "BP", "A1", "A2", "Z")
SNP_INFO_COLUMNS = ("SNP", "CHR", "BP", "A1", "A2")
WEIGHT_COLUMNS = ("GENE", "TISSUE", "CHR", "TSS", "SNP", "BP", "A1", "A2",
                  "WEIGHT", "MODEL", "CVR2")


class IngestError(ValueError):
    """Base class for malformed input files."""

    def __init__(self, message: str, path: str | Path | None = None,
                 line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class MissingColumn(IngestError):
    pass


class DuplicateSnp(IngestError):
    pass


class NonFiniteZ(IngestError):
    pass


class MalformedAllele(IngestError):
    pass


class RaggedRow(IngestError):
    pass


class ValueOutOfRange(IngestError):
    pass


class IdMismatch(ValueError):
    pass


@dataclass(frozen=True)
class SnpRecord:
    id: str
    chrom: int
    pos: int
    a1: str
    a2: str

    def __post_init__(self):
        if not self.id:
            raise ValueError("SNP id must be nonempty")
        if not 1 <= self.chrom <= 22:
            raise ValueError(f"{self.id}: chromosome {self.chrom} outside 1-22")
        if self.pos < 1:
            raise ValueError(f"{self.id}: position must be >= 1")
        if self.a1 not in BASES or self.a2 not in BASES:
            raise MalformedAllele(f"{self.id}: alleles {self.a1}/{self.a2} not single bases")
        if self.a1 == self.a2:
            raise MalformedAllele(f"{self.id}: A1 equals A2 ({self.a1})")

    def swapped(self) -> "SnpRecord":
        return SnpRecord(self.id, self.chrom, self.pos, self.a2, self.a1)


@dataclass(frozen=True)
class GwasSummary:
    """Per-SNP z-scores in file order."""

    records: tuple[SnpRecord, ...]
    z: np.ndarray
    notes: Mapping[str, str] = field(default_factory=dict)
    index: Mapping[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float).copy()
        z.setflags(write=False)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "records", tuple(self.records))
        if z.shape != (len(self.records),):
            raise ValueError("z length does not match record count")
        if not np.all(np.isfinite(z)):
            raise NonFiniteZ("z-scores must be finite")
        index: dict[str, int] = {}
        for i, rec in enumerate(self.records):
            if rec.id in index:
                raise DuplicateSnp(f"duplicate SNP id {rec.id!r}")
            index[rec.id] = i
        object.__setattr__(self, "index", index)

    def __len__(self) -> int:
        return len(self.records)

    def __contains__(self, snp_id: str) -> bool:
        return snp_id in self.index

    def lookup(self, snp_id: str) -> tuple[SnpRecord, float]:
        i = self.index[snp_id]
        return self.records[i], float(self.z[i])


@dataclass(frozen=True)
class GenotypePanel:
    """Dosage matrix, individuals by SNPs.

    ``snps`` is None when no SNP info sidecar was supplied; ``snp_ids`` is
    always populated.
    """

    sample_ids: tuple[str, ...]
    snp_ids: tuple[str, ...]
    dosages: np.ndarray
    snps: tuple[SnpRecord, ...] | None = None

    def __post_init__(self):
        d = np.array(self.dosages, dtype=float)
        if d.ndim != 2:
            raise ValueError("dosages must be a 2-d matrix")
        if d.shape != (len(self.sample_ids), len(self.snp_ids)):
            raise ValueError(f"dosage shape {d.shape} does not match "
                             f"{len(self.sample_ids)} samples x {len(self.snp_ids)} SNPs")
        if np.isnan(d).any():
            raise ValueError("dosages contain missing values")
        if d.size and (d.min() < 0 or d.max() > 2):
            raise ValueOutOfRange("dosages must lie in [0, 2]")
        if len(set(self.snp_ids)) != len(self.snp_ids):
            raise DuplicateSnp("duplicate SNP ids in genotype panel")
        if self.snps is not None and tuple(s.id for s in self.snps) != tuple(self.snp_ids):
            raise ValueError("SNP records do not match genotype columns")
        d.setflags(write=False)
        object.__setattr__(self, "dosages", d)
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        object.__setattr__(self, "snp_ids", tuple(self.snp_ids))

    @property
    def sample_count(self) -> int:
        return len(self.sample_ids)

    def columns(self, ids: Sequence[str]) -> np.ndarray:
        pos = {s: j for j, s in enumerate(self.snp_ids)}
        return self.dosages[:, [pos[s] for s in ids]]


class Action(str, enum.Enum):
    KEEP = "keep"
    FLIP_SIGN = "flip_sign"
    DROP_AMBIGUOUS = "drop_ambiguous"
    DROP_MISMATCH = "drop_mismatch"


@dataclass(frozen=True)
class HarmonizationOutcome:
    action: Action
    matched_id: str


@dataclass(frozen=True)
class GeneWeightSet:
    """Expression prediction weights for one gene in one tissue."""

    gene: str
    tissue: str
    chrom: int
    tss: int
    snps: tuple[SnpRecord, ...]
    weights: np.ndarray
    model: str
    cv_r2: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).copy()
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "snps", tuple(self.snps))
        if w.shape != (len(self.snps),):
            raise ValueError(f"{self.gene}/{self.tissue}: weight count != SNP count")
        if not np.any(w != 0):
            raise ValueError(f"{self.gene}/{self.tissue}: all weights are zero")
        ids = [s.id for s in self.snps]
        if len(set(ids)) != len(ids):
            raise DuplicateSnp(f"{self.gene}/{self.tissue}: duplicate SNPs in weight set")

    @property
    def snp_ids(self) -> tuple[str, ...]:
        return tuple(s.id for s in self.snps)


# ---------------------------------------------------------------------------
# harmonization
# ---------------------------------------------------------------------------

def harmonize_snp(weight_side: SnpRecord, gwas_side: SnpRecord) -> HarmonizationOutcome:
    """Decide how the GWAS z for a SNP must be oriented to match the weights.

    ``flip_sign`` tells the caller to negate the GWAS z-score.
    Strand-ambiguous pairs (A/T, C/G) are dropped on either side.
    """
    if weight_side.id != gwas_side.id:
        raise IdMismatch(f"cannot harmonize {weight_side.id!r} against {gwas_side.id!r}")
    w = (weight_side.a1, weight_side.a2)
    g = (gwas_side.a1, gwas_side.a2)
    if w in AMBIGUOUS_PAIRS or g in AMBIGUOUS_PAIRS:
        action = Action.DROP_AMBIGUOUS
    elif w == g:
        action = Action.KEEP
    elif w == g[::-1]:
        action = Action.FLIP_SIGN
    else:
        action = Action.DROP_MISMATCH
    return HarmonizationOutcome(action, weight_side.id)


def harmonized_z(weight_side: SnpRecord, gwas_side: SnpRecord, z: float) -> float | None:
    """GWAS z oriented to the weight-side effect allele, or None if dropped."""
    outcome = harmonize_snp(weight_side, gwas_side)
    if outcome.action is Action.KEEP:
        return z
    if outcome.action is Action.FLIP_SIGN:
        return -z
    return None


# ---------------------------------------------------------------------------
# parsing helpers
# ---------------------------------------------------------------------------

def _read_rows(path: str | Path) -> tuple[list[str], list[tuple[int, list[str]]]]:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    header = None
    rows = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n").rstrip(" ")
        if not line.strip():
            continue
        fields = line.split("\t")
        if header is None:
            header = [f.strip() for f in fields]
        else:
            rows.append((lineno, fields))
    if header is None:
        raise MissingColumn("file is empty, header row required", path)
    return header, rows


def _column_index(header: list[str], required: Iterable[str], path) -> dict[str, int]:
    idx = {}
    for col in required:
        if col not in header:
            raise MissingColumn(f"missing required column {col!r}", path, 1)
        idx[col] = header.index(col)
    return idx


def _field(fields: list[str], i: int, path, lineno: int) -> str:
    if i >= len(fields):
        raise RaggedRow(f"expected at least {i + 1} fields, found {len(fields)}", path, lineno)
    return fields[i].strip()


def _snp_from_fields(fields, idx, path, lineno) -> SnpRecord:
    snp_id = _field(fields, idx["SNP"], path, lineno)
    a1 = _field(fields, idx["A1"], path, lineno).upper()
    a2 = _field(fields, idx["A2"], path, lineno).upper()
    if a1 not in BASES or a2 not in BASES or a1 == a2:
        raise MalformedAllele(f"SNP {snp_id!r}: invalid alleles {a1!r}/{a2!r}", path, lineno)
    try:
        chrom = int(_field(fields, idx["CHR"], path, lineno))
        pos = int(_field(fields, idx["BP"], path, lineno))
    except ValueError:
        raise IngestError(f"SNP {snp_id!r}: CHR and BP must be integers", path, lineno) from None
    try:
        return SnpRecord(snp_id, chrom, pos, a1, a2)
    except ValueError as exc:
        raise IngestError(str(exc), path, lineno) from None


# ---------------------------------------------------------------------------
# GWAS summary
# ---------------------------------------------------------------------------

def parse_gwas(path: str | Path) -> GwasSummary:
    """Read a GWAS summary TSV with columns SNP CHR BP A1 A2 Z."""
    header, rows = _read_rows(path)
    idx = _column_index(header, GWAS_COLUMNS, path)
    records: list[SnpRecord] = []
    zs: list[float] = []
    seen: dict[str, int] = {}
    for lineno, fields in rows:
        rec = _snp_from_fields(fields, idx, path, lineno)
        if rec.id in seen:
            raise DuplicateSnp(f"SNP {rec.id!r} already seen on line {seen[rec.id]}",
                               path, lineno)
        seen[rec.id] = lineno
        raw = _field(fields, idx["Z"], path, lineno)
        try:
            z = float(raw)
        except ValueError:
            raise NonFiniteZ(f"SNP {rec.id!r}: z {raw!r} is not a number", path, lineno) from None
        if not math.isfinite(z):
            raise NonFiniteZ(f"SNP {rec.id!r}: z {raw!r} is not finite", path, lineno)
        records.append(rec)
        zs.append(z)
    return GwasSummary(tuple(records), np.array(zs, dtype=float))


def emit(text: str, path: str | Path) -> None:
    """Write text to ``path``, or to stdout when the path is ``-``."""
    if str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def format_float(x: float) -> str:
    """Shortest string that round-trips the float."""
    return repr(float(x))


def write_gwas(summary: GwasSummary, path: str | Path) -> None:
    lines = ["\t".join(GWAS_COLUMNS)]
    for rec, z in zip(summary.records, summary.z):
        lines.append("\t".join([rec.id, str(rec.chrom), str(rec.pos), rec.a1, rec.a2,
                                format_float(z)]))
    emit("\n".join(lines) + "\n", path)


# ---------------------------------------------------------------------------
# genotype panels
# ---------------------------------------------------------------------------

def parse_snp_info(path: str | Path) -> list[SnpRecord]:
    header, rows = _read_rows(path)
    idx = _column_index(header, SNP_INFO_COLUMNS, path)
    out = []
    seen = set()
    for lineno, fields in rows:
        rec = _snp_from_fields(fields, idx, path, lineno)
        if rec.id in seen:
            raise DuplicateSnp(f"SNP {rec.id!r} listed twice", path, lineno)
        seen.add(rec.id)
        out.append(rec)
    return out


def write_snp_info(snps: Sequence[SnpRecord], path: str | Path) -> None:
    lines = ["\t".join(SNP_INFO_COLUMNS)]
    lines += [f"{s.id}\t{s.chrom}\t{s.pos}\t{s.a1}\t{s.a2}" for s in snps]
    emit("\n".join(lines) + "\n", path)


def parse_genotypes(path: str | Path, info_path: str | Path | None = None) -> GenotypePanel:
    """Read a dosage TSV (``IID`` then SNP ids) and an optional SNP info sidecar.

    Missing cells (empty, NA, ``.``) are replaced by the column mean.
    """
    header, rows = _read_rows(path)
    if not header or header[0] != "IID":
        raise MissingColumn("first column must be 'IID'", path, 1)
    snp_ids = header[1:]
    if len(set(snp_ids)) != len(snp_ids):
        raise DuplicateSnp("duplicate SNP ids in header", path, 1)
    p = len(snp_ids)
    samples = []
    values = np.empty((len(rows), p), dtype=float)
    for r, (lineno, fields) in enumerate(rows):
        if len(fields) != p + 1:
            raise RaggedRow(f"expected {p + 1} fields, found {len(fields)}", path, lineno)
        samples.append(fields[0].strip())
        for j, cell in enumerate(fields[1:]):
            cell = cell.strip()
            if cell in MISSING_TOKENS:
                values[r, j] = np.nan
                continue
            try:
                v = float(cell)
            except ValueError:
                raise ValueOutOfRange(f"dosage {cell!r} for {snp_ids[j]} is not a number",
                                      path, lineno) from None
            if not 0.0 <= v <= 2.0:
                raise ValueOutOfRange(f"dosage {v} for {snp_ids[j]} outside [0, 2]",
                                      path, lineno)
            values[r, j] = v
    missing = np.isnan(values)
    if missing.any():
        counts = (~missing).sum(axis=0)
        empty = [snp_ids[j] for j in np.flatnonzero(counts == 0)]
        if empty:
            raise ValueOutOfRange(f"no observed dosages for {', '.join(empty)}", path)
        means = np.nansum(values, axis=0) / counts
        values = np.where(missing, means[None, :], values)

    snps = None
    if info_path is not None:
        info = {s.id: s for s in parse_snp_info(info_path)}
        absent = [s for s in snp_ids if s not in info]
        if absent:
            raise MissingColumn(f"SNP info lacks {len(absent)} genotype SNPs "
                                f"(first: {absent[0]!r})", info_path)
        snps = tuple(info[s] for s in snp_ids)
    return GenotypePanel(tuple(samples), tuple(snp_ids), values, snps)


def write_genotypes(panel: GenotypePanel, path: str | Path) -> None:
    lines = ["\t".join(("IID",) + panel.snp_ids)]
    for sid, row in zip(panel.sample_ids, panel.dosages):
        lines.append("\t".join([sid] + [format_float(v) for v in row]))
    emit("\n".join(lines) + "\n", path)


# ---------------------------------------------------------------------------
# weight panels
# ---------------------------------------------------------------------------

def parse_weight_panel(path: str | Path) -> list[GeneWeightSet]:
    """Read a weight panel; gene-tissue blocks keep first-appearance order."""
    header, rows = _read_rows(path)
    idx = _column_index(header, WEIGHT_COLUMNS, path)
    groups: dict[tuple[str, str], dict] = {}
    for lineno, fields in rows:
        gene = _field(fields, idx["GENE"], path, lineno)
        tissue = _field(fields, idx["TISSUE"], path, lineno)
        rec = _snp_from_fields(fields, idx, path, lineno)
        try:
            chrom = int(_field(fields, idx["CHR"], path, lineno))
            tss = int(_field(fields, idx["TSS"], path, lineno))
            weight = float(_field(fields, idx["WEIGHT"], path, lineno))
            cvr2 = float(_field(fields, idx["CVR2"], path, lineno))
        except ValueError:
            raise IngestError("CHR/TSS must be integers, WEIGHT/CVR2 numbers",
                              path, lineno) from None
        if not math.isfinite(weight):
            raise IngestError(f"{gene}: weight for {rec.id} is not finite", path, lineno)
        model = _field(fields, idx["MODEL"], path, lineno)
        g = groups.setdefault((gene, tissue), {
            "chrom": chrom, "tss": tss, "model": model, "cv_r2": cvr2,
            "snps": [], "weights": [], "line": lineno})
        if rec.id in {s.id for s in g["snps"]}:
            raise DuplicateSnp(f"{gene}/{tissue}: SNP {rec.id!r} listed twice", path, lineno)
        g["snps"].append(rec)
        g["weights"].append(weight)
    out = []
    for (gene, tissue), g in groups.items():
        try:
            out.append(GeneWeightSet(gene, tissue, g["chrom"], g["tss"], tuple(g["snps"]),
                                     np.array(g["weights"]), g["model"], g["cv_r2"]))
        except ValueError as exc:
            raise IngestError(str(exc), path, g["line"]) from None
    return out


def write_weight_panel(sets: Iterable[GeneWeightSet], path: str | Path) -> None:
    lines = ["\t".join(WEIGHT_COLUMNS)]
    for ws in sets:
        for snp, w in zip(ws.snps, ws.weights):
            lines.append("\t".join([
                ws.gene, ws.tissue, str(ws.chrom), str(ws.tss), snp.id, str(snp.pos),
                snp.a1, snp.a2, format_float(w), ws.model, format_float(ws.cv_r2)]))
    emit("\n".join(lines) + "\n", path)


# ---------------------------------------------------------------------------
# expression
# ---------------------------------------------------------------------------

EXPRESSION_COLUMNS = ("GENE", "TISSUE", "CHR", "TSS")


@dataclass(frozen=True)
class ExpressionRow:
    gene: str
    tissue: str
    chrom: int
    tss: int
    values: np.ndarray


def parse_expression(path: str | Path) -> tuple[tuple[str, ...], list[ExpressionRow]]:
    """Read ``GENE TISSUE CHR TSS <IID>...``; one row per gene and tissue."""
    header, rows = _read_rows(path)
    if tuple(header[:4]) != EXPRESSION_COLUMNS:
        raise MissingColumn(f"header must start with {' '.join(EXPRESSION_COLUMNS)}", path, 1)
    samples = tuple(header[4:])
    if not samples:
        raise MissingColumn("no sample columns", path, 1)
    if len(set(samples)) != len(samples):
        raise IngestError("duplicate sample ids in header", path, 1)
    out = []
    seen = set()
    for lineno, fields in rows:
        if len(fields) != len(header):
            raise RaggedRow(f"expected {len(header)} fields, found {len(fields)}", path, lineno)
        gene, tissue = fields[0].strip(), fields[1].strip()
        if (gene, tissue) in seen:
            raise IngestError(f"{gene}/{tissue} listed twice", path, lineno)
        seen.add((gene, tissue))
        try:
            chrom, tss = int(fields[2]), int(fields[3])
            values = np.array([float(v) for v in fields[4:]])
        except ValueError:
            raise IngestError(f"{gene}: non-numeric CHR, TSS or expression value",
                              path, lineno) from None
        if not np.all(np.isfinite(values)):
            raise ValueOutOfRange(f"{gene}: expression values must be finite", path, lineno)
        out.append(ExpressionRow(gene, tissue, chrom, tss, values))
    return samples, out


def write_expression(samples: Sequence[str], rows: Iterable[ExpressionRow],
                     path: str | Path) -> None:
    lines = ["\t".join(EXPRESSION_COLUMNS + tuple(samples))]
    for r in rows:
        lines.append("\t".join([r.gene, r.tissue, str(r.chrom), str(r.tss)]
                               + [format_float(v) for v in r.values]))
    emit("\n".join(lines) + "\n", path)
