import numpy as np
import pytest

from nes.fields import FieldConfig, FieldModel
from nes.geometry import icosphere
from nes.training import SceneSpec, generate_scene


@pytest.fixture(scope="session")
def sphere():
    return icosphere(4)


@pytest.fixture(scope="session")
def coarse_sphere():
    return icosphere(2)


@pytest.fixture(scope="session")
def small_scene():
    return generate_scene(SceneSpec(resolution=48, level=3), seed=3)


def random_model(config=None, seed=0, scale=0.5):
    """Model with nonzero output layers so every path carries signal."""
    model = FieldModel(config or FieldConfig(depth=4, width=16, octaves=3), seed=seed, zero_final=False)
    rng = np.random.default_rng(seed + 100)
    for name, p in model.parameters().items():
        if name.endswith("bias") and name != "log_beta":
            p.value = rng.normal(0, 0.1, p.value.shape)
    net = model.offset_net
    net.weights[-1].value = net.weights[-1].value * scale * 0.2
    return model


ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for an acceptance criterion and return the verdict."""
    def record(number, name, ok, detail=""):
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {name}" + (f" ({detail})" if detail else "")
        ACCEPTANCE.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
