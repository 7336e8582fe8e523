"""Shared fixtures.

``pipeline_run`` drives the default CLI pipeline once per session; tests that
need a trained base model, pairs or an unlearned model reuse its artifacts.
"""

import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import pytest

from duo import cli
from duo.config import ExperimentConfig
from duo.model import load_checkpoint
from duo.pairgen import load_pairs
from duo.toyworld import default_world

PIPELINE = ("synth-data", "train-base", "make-pairs", "unlearn", "attack", "eval", "report")


@dataclass
class PipelineRun:
    out: Path
    timings: dict = field(default_factory=dict)
    exit_codes: dict = field(default_factory=dict)

    @property
    def total_seconds(self) -> float:
        return sum(self.timings.values())


def run_pipeline(out: Path, stages=PIPELINE, extra=()) -> PipelineRun:
    run = PipelineRun(Path(out))
    for stage in stages:
        t0 = time.perf_counter()
        run.exit_codes[stage] = cli.main([stage, "--out", str(out), *extra])
        run.timings[stage] = time.perf_counter() - t0
        if run.exit_codes[stage] != 0:
            break
    return run


@pytest.fixture(scope="session")
def pipeline_run(tmp_path_factory) -> PipelineRun:
    # DUO_TEST_PIPELINE points at a finished run to skip the rebuild during development
    reuse = os.environ.get("DUO_TEST_PIPELINE")
    if reuse:
        return PipelineRun(Path(reuse), exit_codes={s: 0 for s in PIPELINE})
    run = run_pipeline(tmp_path_factory.mktemp("pipeline"))
    assert all(code == 0 for code in run.exit_codes.values()), run.exit_codes
    return run


@pytest.fixture(scope="session")
def cfg() -> ExperimentConfig:
    return ExperimentConfig()


@pytest.fixture(scope="session")
def world():
    return default_world()


@pytest.fixture(scope="session")
def schedule(cfg):
    return cfg.schedule.build()


@pytest.fixture(scope="session")
def base_model(pipeline_run):
    return load_checkpoint(pipeline_run.out / "base" / "model.npz")[0]


@pytest.fixture(scope="session")
def victim_model(pipeline_run):
    return load_checkpoint(pipeline_run.out / "unlearn" / "model.npz")[0]


@pytest.fixture(scope="session")
def baseline_model(pipeline_run):
    return load_checkpoint(pipeline_run.out / "attack" / "baseline_model.npz")[0]


@pytest.fixture(scope="session")
def pairs(pipeline_run, world):
    return load_pairs(pipeline_run.out / "pairs" / "pairs.csv", world)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records the verdict for the summary, then asserts it."""
    def record(n: int, ok: bool, detail: str) -> None:
        ACCEPTANCE[n] = (bool(ok), detail)
        assert ok, f"criterion {n}: {detail}"
    return record
