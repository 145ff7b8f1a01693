from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from sbwdiag.catalog import Catalog

DATA = Path(__file__).resolve().parent / "data"
FIXTURE = DATA / "fixture_500.csv"
FIXTURE_SCHEMA = DATA / "fixture_schema.ini"
FIXTURE_CONFIG = DATA / "fixture_config.ini"
INJECT_CONFIG = DATA / "inject.ini"


def make_catalog(n: int | None = None, **columns) -> Catalog:
    """Catalog with plausible defaults for every column not supplied."""
    ids = columns.pop("id", None)
    if n is None:
        n = len(next(iter(columns.values())))
    base = {
        "teff": np.full(n, 5000.0), "logg": np.full(n, 3.5), "feh": np.zeros(n),
        "alpha_fe": np.zeros(n), "snr": np.full(n, 100.0), "plx": np.full(n, 1.0),
        "plx_err": np.full(n, 0.05), "distance": np.ones(n), "gal_r": np.full(n, 8.0),
        "gal_z": np.zeros(n), "age_infer": np.full(n, 5.0),
    }
    base.update({k: np.asarray(v, dtype=float) for k, v in columns.items()})
    ids = [f"s{k:05d}" for k in range(n)] if ids is None else ids
    return Catalog(ids, base)


@pytest.fixture
def fixture_paths():
    return {"input": FIXTURE, "schema": FIXTURE_SCHEMA, "config": FIXTURE_CONFIG}


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
