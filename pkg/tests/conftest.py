import numpy as np
import pytest

from stmrf.energy import MrfProblem
from stmrf.transitions import TransitionMatrix, build_tau_pair


def random_problem(rng, shape=(2, 2, 2), K=3, beta_max=2.0):
    """Random unaries and random valid delta / tau matrices."""
    T, H, W = shape
    U = rng.uniform(0.0, 3.0, (T, H, W, K))
    D = rng.uniform(0.0, 1.0, (K, K))
    D = (D + D.T) / 2
    pairs = []
    for _ in range(T - 1):
        F = rng.uniform(0.0, 1.0, (K, K))
        np.fill_diagonal(F, 1.0)
        pairs.append(build_tau_pair(F))
    return MrfProblem(U, TransitionMatrix(D), pairs, rng.uniform(0, beta_max), rng.uniform(0, beta_max))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


SMALL_CONFIG = """\
scenario.height = 40
scenario.width = 40
scenario.n_patches = 12
scenario.n_water = 1
scenario.dates = 2014-06-08,2014-07-22,2014-09-04
sampling.per_polygon = 6
sampling.min_dist_m = 10
sampling.max_half = 4
glcm.window = 5
glcm.levels = 8
ivm.sigma_grid = 1,2
ivm.c_grid = 10
ivm.folds = 2
ivm.max_import = 20
pipeline.runs = 2
pipeline.out = out
"""


def run_pipeline(workdir, *extra, config=SMALL_CONFIG):
    """Write the config into ``workdir`` and run all four stages; returns exit codes."""
    from stmrf.cli import main

    workdir.mkdir(parents=True, exist_ok=True)
    (workdir / "out").mkdir(exist_ok=True)
    cfg = workdir / "cfg.txt"
    cfg.write_text(config)
    return [main([cmd, "--config", str(cfg), *extra]) for cmd in ("synth", "classify", "regularize", "assess")]


def tree_bytes(root):
    """``{relative path: bytes}`` of every file under ``root``."""
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, name: str, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
