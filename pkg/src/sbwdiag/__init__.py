"""Diagnostics for stable-but-wrong (SBW) age inference in survey catalogs.

The package maps where inferred stellar ages drift away from a reference
across the (spectroscopic SNR, parallax precision) plane, checks that the
drift is detectable against bootstrap noise, and propagates the finding to
age-metallicity relations and formation-history tracers.
"""

__version__ = "0.1.0"

from .catalog import Catalog, QualityCuts, apply_cuts, load_catalog, select_hq  # noqa: E402
from .grid import GridSpec, build_grid  # noqa: E402
from .sbw import GridDiagnostics, sbw_map_internal, sbw_map_truth  # noqa: E402

__all__ = [
    "Catalog",
    "GridDiagnostics",
    "GridSpec",
    "QualityCuts",
    "__version__",
    "apply_cuts",
    "build_grid",
    "load_catalog",
    "sbw_map_internal",
    "sbw_map_truth",
    "select_hq",
]
