import time

import numpy as np
import pytest

from varstream.cli import RunConfig, run
from varstream.grid import boundary_data_from_function, build_disk, sample_field
from varstream.lagrangian import make_case_study
from varstream.reference import remark_solution


def reference_config(h: float, schedule=(4, 8, 16, 32), tol=1e-8) -> RunConfig:
    return RunConfig(
        domain={"kind": "disk", "R": 0.9},
        h=h,
        family="a",
        schedule=tuple(schedule),
        Q=10.0,
        psi={"kind": "reference"},
        tol=tol,
        max_iter=100000,
        seed=0,
    )


def random_config(h: float, seed: int, schedule=(4, 8, 16, 32)) -> RunConfig:
    return RunConfig(
        domain={"kind": "disk", "R": 0.9},
        h=h,
        family="a",
        schedule=tuple(schedule),
        Q=10.0,
        psi={"kind": "random", "seed": seed, "amplitude": 0.3},
        tol=1e-8,
        max_iter=100000,
        seed=seed,
    )


@pytest.fixture(scope="session")
def case_study():
    return make_case_study()


@pytest.fixture(scope="session")
def reference_run_32():
    """Reference pipeline at h = 1/32 (shared by module tests)."""
    report, artifacts = run(reference_config(1 / 32))
    return report, artifacts


@pytest.fixture(scope="session")
def reference_study():
    """Reference pipeline at h in {1/32, 1/64, 1/128} with wall times."""
    out = {}
    for hinv in (32, 64, 128):
        t0 = time.time()
        report, artifacts = run(reference_config(1.0 / hinv))
        out[hinv] = {"report": report, "artifacts": artifacts, "seconds": time.time() - t0}
    return out


@pytest.fixture(scope="session")
def random_runs():
    """Three seeded random-boundary runs at two grids each."""
    out = {}
    for seed in (1, 2, 3):
        for hinv in (32, 64):
            report, artifacts = run(random_config(1.0 / hinv, seed))
            out[(seed, hinv)] = {"report": report, "artifacts": artifacts}
    return out


@pytest.fixture(scope="session")
def reference_samples():
    """Closed-form disk solution sampled at the three study grids."""
    ref = remark_solution(0.9)
    out = {}
    for hinv in (32, 64, 128):
        grid = build_disk(0.9, 1.0 / hinv)
        out[hinv] = {
            "grid": grid,
            "u": sample_field(grid, ref.eval),
            "bdata": boundary_data_from_function(grid, ref.eval, Q=10.0),
        }
    return out


def fit_order(hs, errs) -> float:
    """Least-squares convergence order of errs ~ C h^p."""
    hs = np.asarray(hs, dtype=float)
    errs = np.asarray(errs, dtype=float)
    return float(np.polyfit(np.log(hs), np.log(np.maximum(errs, 1e-300)), 1)[0])
