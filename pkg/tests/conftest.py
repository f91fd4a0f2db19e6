"""Shared fixtures: cached standard-benchmark runs and the acceptance summary."""

import time
from dataclasses import replace
from pathlib import Path

import pytest

from fedlab.config import apply_overrides, load_config
from fedlab.orchestrator import run_experiment

ROOT = Path(__file__).resolve().parents[1]
STANDARD = ROOT / "configs" / "standard_benchmark.toml"
SEEDS = (1, 2, 3)

_criteria: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    _criteria[number] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_criteria):
        ok, detail = _criteria[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


class Bench:
    """Lazily runs and caches standard-benchmark experiments."""

    def __init__(self):
        self.base = load_config(STANDARD)
        self._runs = {}
        self.wall = {}

    def config(self, seed, algorithm="fedecouple", **hyper):
        cfg = apply_overrides(self.base, seed=seed, algorithm=algorithm)
        return replace(cfg, hyper=replace(cfg.hyper, **hyper)) if hyper else cfg

    def run(self, seed, algorithm="fedecouple", **hyper):
        key = (seed, algorithm, tuple(sorted(hyper.items())))
        if key not in self._runs:
            t0 = time.perf_counter()
            self._runs[key] = run_experiment(self.config(seed, algorithm, **hyper), workers=0)
            self.wall[key] = time.perf_counter() - t0
        return self._runs[key]


@pytest.fixture(scope="session")
def bench():
    return Bench()
