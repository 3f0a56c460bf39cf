import numpy as np
import pytest
import torch

from phenofactor.embedders import AttributeEmbedder
from phenofactor.networks import NetworkBundle, NetworkConfig
from phenofactor.phenotype import SHAPE_REGIONS, THETA_DIMS
from phenofactor.synthetic import render_toy_face, sample_toy_params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_records():
    r = np.random.default_rng(7)
    return [render_toy_face(sample_toy_params(r), 64) for _ in range(6)]


@pytest.fixture(scope="session")
def untrained_embedders():
    torch.manual_seed(0)
    return {k: AttributeEmbedder(k, THETA_DIMS[k]).eval() for k in SHAPE_REGIONS}


@pytest.fixture
def micro_nets():
    return NetworkBundle.build(NetworkConfig.preset("micro"), seed=3)


@pytest.fixture
def micro_nets64():
    return NetworkBundle.build(NetworkConfig.preset("micro"), seed=3, dtype=torch.float64)


# -- acceptance summary -----------------------------------------------------------

ACCEPTANCE_RESULTS: dict[int, list[tuple[bool, str]]] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS.setdefault(number, []).append((bool(ok), detail))
    print(f"CRITERION {number}: {'PASS' if ok else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        checks = ACCEPTANCE_RESULTS[number]
        ok = all(c[0] for c in checks)
        detail = "; ".join(c[1] for c in checks)
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})")
