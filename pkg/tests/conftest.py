"""Shared fixtures.

``pipeline_run`` trains and evaluates the full default pipeline once per test
session (a few minutes on one core).  Set ``LATENTGUARD_RUN_DIR`` to reuse a
finished run directory instead.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest

from latentguard import facegen
from latentguard.config import RunConfig
from latentguard.diffusion import make_linear_schedule
from latentguard.pipeline import load_trained, run_pipeline

RUN_OVERRIDES = {"eval.pairs_csv": "true"}
ACCEPTANCE_LINES: list[str] = []
RUN_SECONDS: dict[str, float] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance():
    """``acceptance(n, ok, detail)`` records one pass/fail line per criterion."""

    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def run_default_pipeline(out: Path) -> RunConfig:
    cfg = RunConfig.resolve(None, RUN_OVERRIDES, out)
    t0 = time.perf_counter()
    run_pipeline(cfg)
    RUN_SECONDS[str(out)] = time.perf_counter() - t0
    return cfg


@pytest.fixture(scope="session")
def pipeline_run(tmp_path_factory) -> RunConfig:
    reuse = os.environ.get("LATENTGUARD_RUN_DIR")
    if reuse and (Path(reuse) / "reports" / "summary.csv").exists():
        return RunConfig.resolve(None, RUN_OVERRIDES, reuse)
    return run_default_pipeline(tmp_path_factory.mktemp("run_a"))


@pytest.fixture(scope="session")
def trained(pipeline_run):
    return load_trained(pipeline_run)


@pytest.fixture(scope="session")
def trained64(trained):
    return trained.astype(np.float64)


@pytest.fixture(scope="session")
def dataset(pipeline_run):
    return facegen.load_dataset(pipeline_run.output_dir / "data")


@pytest.fixture(scope="session")
def sched():
    return make_linear_schedule()
