import os
import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile("ci", max_examples=200, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


ACCEPTANCE_LINES = {}


def report(criterion: int, ok: bool, detail: str) -> None:
    """Record (and print) the one-line verdict of an acceptance criterion."""
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[criterion] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def bench():
    """Default synthetic bench with every method trained once per session."""
    from setret.bench import synth_stress_datasets
    from setret.experiment import BenchConfig, make_world, train_methods

    t0 = time.perf_counter()
    cfg = BenchConfig()
    world = make_world(cfg)
    methods, logs = train_methods(cfg, world)
    stress = synth_stress_datasets(world.test_gallery, world.distractors, cfg.stress)
    return {"cfg": cfg, "world": world, "methods": methods, "logs": logs, "stress": stress,
            "seconds": {"build": time.perf_counter() - t0}}


@pytest.fixture(scope="session")
def bench_eval(bench):
    """Full results table (every method, d = 0..3, with timings)."""
    from setret.experiment import run_eval

    t0 = time.perf_counter()
    rows, _ = run_eval(bench["cfg"], world=bench["world"], trained=bench["methods"],
                       timing_queries=30, timing_rounds=5)
    bench["seconds"]["eval"] = time.perf_counter() - t0
    return {(r["method"], r["d"]): r for r in rows}
