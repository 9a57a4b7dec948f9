import numpy as np
import pytest

from dni.netgraph import LayerSpec, ArchSpec, conv, dncnn, init_params, relu

CREATED = "2000-01-01T00:00:00Z"


@pytest.fixture
def tiny_spec():
    return dncnn(depth=3, width=4)


@pytest.fixture
def tiny_bn_spec():
    return dncnn(depth=4, width=4, bn=True)


@pytest.fixture
def tiny_images():
    rng = np.random.default_rng(123)
    # smooth-ish textures so denoising has something to learn
    out = []
    for _ in range(3):
        base = rng.uniform(0, 255, (6, 6))
        img = np.kron(base, np.ones((4, 4)))
        out.append(img[None, None].astype(np.float32))
    return out


def linear_spec(width: int = 3) -> ArchSpec:
    """Conv-only network: the forward map is linear in the parameters."""
    layers: tuple[LayerSpec, ...] = (conv(1, width, 3), conv(width, 1, 3))
    return ArchSpec("linear2", layers, residual_output=False)


def relu_spec(width: int = 3) -> ArchSpec:
    return ArchSpec("relu2", (conv(1, width, 3), relu(), conv(width, 1, 3)), residual_output=False)


def random_model(spec, seed, created=CREATED):
    return init_params(spec, seed, created=created)


_ACCEPTANCE: list[str] = []


def record(line: str) -> None:
    print(line)
    _ACCEPTANCE.append(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
