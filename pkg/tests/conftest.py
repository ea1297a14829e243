from __future__ import annotations

from functools import lru_cache

import pytest

from mecguard import load_scenario, run_scenario
from mecguard.cli import bundled_scenarios_dir
from mecguard.detector import DetectorModel, train_zscore

BUNDLED = sorted(p.stem for p in bundled_scenarios_dir().glob("*.scenario"))

# pass/fail line per acceptance criterion, printed at the end of the session
CRITERIA: dict[int, tuple[bool, str]] = {}


@lru_cache(maxsize=None)
def scenario(name: str):
    return load_scenario(bundled_scenarios_dir() / f"{name}.scenario")


@lru_cache(maxsize=None)
def cached_run(name: str, seed: int | None = None, baseline: bool = False):
    """One run per (scenario, seed, arm) for the whole session; runs are deterministic."""
    return run_scenario(scenario(name), seed=seed, baseline=baseline)


@lru_cache(maxsize=None)
def quiet_zscore_model(z_threshold: float = 3.0) -> DetectorModel:
    clean = run_scenario(scenario("quiet"), keep_features=True)
    return train_zscore(clean.features, version=2, z_threshold=z_threshold)


@pytest.fixture
def bundled():
    return list(BUNDLED)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
