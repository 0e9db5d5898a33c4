from __future__ import annotations

import time
from dataclasses import dataclass

import pytest

from otdr_mtl.dataset import Corpus, SimulationGrid, build_corpus
from otdr_mtl.nn import ModelParams, TrainConfig, train_model

REFERENCE_SEED = 0

ACCEPTANCE_LINES = pytest.StashKey[dict]()


@dataclass
class ReferenceRun:
    corpus: Corpus
    model: ModelParams
    curves: dict
    seconds: float  # corpus build plus training


@pytest.fixture(scope="session")
def reference_run() -> ReferenceRun:
    t0 = time.perf_counter()
    # 6300 traces, two windows each: 12,600 windows
    corpus = build_corpus(SimulationGrid(n_traces=6300), window_len=35, seed=REFERENCE_SEED)
    model, curves = train_model(corpus, cfg=TrainConfig(seed=REFERENCE_SEED))
    return ReferenceRun(corpus, model, curves, time.perf_counter() - t0)


@pytest.fixture(scope="session")
def reference_corpus(reference_run):
    return reference_run.corpus


@pytest.fixture(scope="session")
def reference_training(reference_run):
    return reference_run.model, reference_run.curves


@pytest.fixture(scope="session")
def reference_model(reference_run):
    return reference_run.model


@pytest.fixture(scope="session")
def acceptance_report(request):
    """Record one PASS/FAIL line per acceptance criterion, echoed in the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE_LINES, {})

    def record(number: int, name: str, passed: bool, detail: str) -> None:
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {name}: {detail}"
        lines[number] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
