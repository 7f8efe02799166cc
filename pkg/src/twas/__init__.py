"""Gene-level association from GWAS summary statistics and expression weights."""

from . import assoc, ingest, ld, mtp, report, sim, train

__version__ = "0.1.0"

__all__ = ["assoc", "ingest", "ld", "mtp", "report", "sim", "train", "__version__"]
