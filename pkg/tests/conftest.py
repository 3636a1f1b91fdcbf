import numpy as np
import pytest
import torch

from cascadeflow.dit import DiT, DiTConfig

torch.set_num_threads(1)

TINY = DiTConfig(layers=2, dim=32, heads=2, num_classes=6, abs_grid=(3, 4, 4))


def randomize(model: torch.nn.Module, std: float = 0.2, seed: int = 0) -> torch.nn.Module:
    """Overwrite every parameter with Gaussian noise so no gradient vanishes."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * std)
    return model


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return randomize(DiT(TINY)).double()


@pytest.fixture
def latent():
    return torch.from_numpy(np.random.default_rng(0).standard_normal((2, 3, 4, 4, 8)))


# one line per acceptance criterion, repeated at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
