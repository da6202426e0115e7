import pytest
import torch

from smoothlab.denoiser import Denoiser, DenoiserConfig
from smoothlab.schedule import make_linear_schedule


@pytest.fixture
def schedule():
    return make_linear_schedule(100, 1e-4, 0.2)


def small_model(data_dim=8, seed=0, dtype=torch.float64, **kw):
    """A randomly initialized float64 MLP with a non-zero output layer."""
    torch.manual_seed(seed)
    cfg = DenoiserConfig(data_dim=data_dim, hidden_width=kw.pop("hidden_width", 32), depth=kw.pop("depth", 2),
                         time_embed_dim=8, cond_embed_dim=4, num_conditions=3, **kw)
    model = Denoiser(cfg).to(dtype)
    with torch.no_grad():
        model.out.weight.normal_(0, 0.3)
        model.out.bias.normal_(0, 0.1)
    return model


@pytest.fixture
def model8():
    return small_model(8)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
