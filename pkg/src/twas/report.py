"""Result tables, chromosome-position plot data, and gene counts."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Iterable, Sequence

from .assoc import NOT_TESTABLE, TwasResult
from .ingest import IngestError, MissingColumn, emit

RESULT_COLUMNS = ("GENE", "TISSUE", "CHR", "NSNPS", "MODEL", "TWAS_Z", "TWAS_P", "LOG10P",
                  "STATUS", "BP")
ADJUST_COLUMNS = ("BONF_REJECT", "BH_REJECT", "BONF_THRESHOLD", "BH_KSTAR", "M_USED")
PLOT_COLUMNS = ("GENE", "CHR", "BP", "NEGLOG10P", "REJECTED")
NA = "NA"


def format_p(log10_p: float) -> str:
    """Scientific notation with 3 significant digits (``4.92E-34``) from log10 p.

    Works below the float64 range, where p itself underflows.
    """
    if log10_p >= 0:
        return "1.00E+00"
    exp = math.floor(log10_p)
    mant = round(10.0 ** (log10_p - exp), 2)
    if mant >= 10.0:
        mant /= 10.0
        exp += 1
    return f"{mant:.2f}E{'-' if exp < 0 else '+'}{abs(exp):02d}"


def parse_p(text: str) -> tuple[float, float]:
    """Inverse of format_p: (p, log10 p)."""
    mant, exp = text.upper().split("E")
    log10_p = math.log10(float(mant)) + int(exp)
    return 10.0 ** log10_p, log10_p


def _fmt(v, spec: str = ".6g") -> str:
    if v is None:
        return NA
    if isinstance(v, bool):
        return "1" if v else "0"
    return format(v, spec)


def sort_results(results: Iterable[TwasResult]) -> list[TwasResult]:
    """Group by tissue (first-appearance order), ascending p within a tissue,
    not_testable rows last; ties keep input order."""
    results = list(results)
    tissue_rank: dict[str, int] = {}
    for r in results:
        tissue_rank.setdefault(r.tissue, len(tissue_rank))

    def key(item):
        i, r = item
        untestable = r.status == NOT_TESTABLE or r.log10_p is None
        return (tissue_rank[r.tissue], untestable, 0.0 if untestable else r.log10_p, i)

    return [r for _, r in sorted(enumerate(results), key=key)]


def results_text(results: Iterable[TwasResult], *, sort: bool = True) -> str:
    results = sort_results(results) if sort else list(results)
    annotated = any(r.m_used is not None for r in results)
    cols = RESULT_COLUMNS + (ADJUST_COLUMNS if annotated else ())
    lines = ["\t".join(cols)]
    for r in results:
        testable = r.status != NOT_TESTABLE and r.z_twas is not None
        row = [r.gene, r.tissue, str(r.chrom), str(r.n_snps_used), r.model,
               _fmt(r.z_twas) if testable else NA,
               format_p(r.log10_p) if testable else NA,
               _fmt(r.log10_p, ".10g") if testable else NA,
               r.status,
               NA if r.pos is None else str(r.pos)]
        if annotated:
            row += [_fmt(r.bonf_reject), _fmt(r.bh_reject), _fmt(r.bonf_threshold, ".6g"),
                    _fmt(r.bh_kstar, "d"), _fmt(r.m_used, "d")]
        lines.append("\t".join(row))
    return "\n".join(lines) + "\n"


def write_results_table(results: Iterable[TwasResult], path: str | Path, *,
                        sort: bool = True) -> None:
    emit(results_text(results, sort=sort), path)


def _opt(fields: dict, name: str, conv):
    v = fields.get(name, NA)
    return None if v == NA else conv(v)


def read_results_table(path: str | Path) -> list[TwasResult]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\r\n") for ln in fh if ln.strip()]
    if not lines:
        raise MissingColumn("results file is empty", path)
    header = lines[0].split("\t")
    for col in RESULT_COLUMNS[:-1]:
        if col not in header:
            raise MissingColumn(f"missing required column {col!r}", path, 1)
    out = []
    for lineno, line in enumerate(lines[1:], start=2):
        values = line.split("\t")
        if len(values) != len(header):
            raise IngestError(f"expected {len(header)} fields, found {len(values)}", path, lineno)
        f = dict(zip(header, values))
        try:
            log10_p = _opt(f, "LOG10P", float)
            p = None
            if f["TWAS_P"] != NA:
                p = 10.0 ** log10_p if log10_p is not None else parse_p(f["TWAS_P"])[0]
            out.append(TwasResult(
                gene=f["GENE"], tissue=f["TISSUE"], chrom=int(f["CHR"]),
                n_snps_used=int(f["NSNPS"]), model=f["MODEL"],
                z_twas=_opt(f, "TWAS_Z", float), p=p, log10_p=log10_p,
                status=f["STATUS"], pos=_opt(f, "BP", int),
                bonf_reject=_opt(f, "BONF_REJECT", lambda s: s == "1"),
                bh_reject=_opt(f, "BH_REJECT", lambda s: s == "1"),
                bonf_threshold=_opt(f, "BONF_THRESHOLD", float),
                bh_kstar=_opt(f, "BH_KSTAR", int),
                m_used=_opt(f, "M_USED", int)))
        except ValueError as exc:
            raise IngestError(f"bad value: {exc}", path, lineno) from None
    return out


def position_plot_text(results: Iterable[TwasResult], alpha: float = 0.05,
                       m: int = 15000) -> str:
    """Plot data (one row per testable gene): position vs -log10 p, with the
    REJECTED flag taken against the Bonferroni line alpha / m."""
    cut = -math.log10(alpha / m)
    lines = ["\t".join(PLOT_COLUMNS)]
    for r in results:
        if r.status == NOT_TESTABLE or r.log10_p is None:
            continue
        if r.pos is None:
            raise MissingColumn(f"gene {r.gene}: no position available (column 'BP')")
        nl = -r.log10_p + 0.0
        lines.append(f"{r.gene}\t{r.chrom}\t{r.pos}\t{nl:.6g}\t{int(nl >= cut)}")
    return "\n".join(lines) + "\n"


def write_position_plot_data(results: Iterable[TwasResult], path: str | Path,
                             alpha: float = 0.05, m: int = 15000,
                             svg_path: str | Path | None = None) -> None:
    results = list(results)
    emit(position_plot_text(results, alpha, m), path)
    if svg_path is not None:
        emit(position_svg(results, alpha, m), svg_path)


def position_svg(results: Sequence[TwasResult], alpha: float = 0.05, m: int = 15000,
                 width: int = 640, height: int = 360) -> str:
    """Static scatter: x = position, y = -log10 p, dashed line at alpha / m."""
    pts = [(r.pos, -r.log10_p, r.gene) for r in results
           if r.status != NOT_TESTABLE and r.log10_p is not None]
    if any(x is None for x, _, _ in pts):
        raise MissingColumn("no position available (column 'BP')")
    cut = -math.log10(alpha / m)
    pad = 40
    xs = [x for x, _, _ in pts] or [0, 1]
    x0, x1 = min(xs), max(xs)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    ymax = max([y for _, y, _ in pts] + [cut]) * 1.05

    def sx(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def sy(y):
        return height - pad - y / ymax * (height - 2 * pad)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" '
           'stroke="black"/>',
           f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
           f'<line x1="{pad}" y1="{sy(cut):.2f}" x2="{width - pad}" y2="{sy(cut):.2f}" '
           'stroke="red" stroke-dasharray="4 3"/>',
           f'<text x="{width / 2:.0f}" y="{height - 8}" text-anchor="middle" '
           'font-size="12">position (bp)</text>',
           f'<text x="12" y="{height / 2:.0f}" font-size="12" '
           f'transform="rotate(-90 12 {height / 2:.0f})">-log10 p</text>']
    for x, y, gene in pts:
        colour = "firebrick" if y >= cut else "steelblue"
        out.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="3" fill="{colour}">'
                   f'<title>{gene}</title></circle>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def unique_gene_count(results: Iterable[TwasResult], rejected_only: bool = False) -> int:
    """Distinct gene symbols; a gene found in several tissues counts once.

    With ``rejected_only`` only rows flagged by Bonferroni or BH are counted.
    """
    genes = set()
    for r in results:
        if rejected_only and not (r.bonf_reject or r.bh_reject):
            continue
        genes.add(r.gene)
    return len(genes)
