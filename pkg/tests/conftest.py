import pytest

from didsee.denoiser import DenoiserConfig
from didsee.synthdata import SceneConfig, generate_dataset


def tiny_denoiser(**kw):
    base = dict(base_channels=8, depth_levels=2, time_embed_dim=16, max_groups=4)
    base.update(kw)
    return DenoiserConfig(**base)


@pytest.fixture(scope="session")
def small_scenes():
    return generate_dataset(8, 7, SceneConfig(height=32, width=32))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import LINES
    except ImportError:
        return
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES):
            terminalreporter.write_line(line)
