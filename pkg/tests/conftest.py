import numpy as np
import pytest
import torch

from unicoal.config import desk_model_config

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_model_cfg():
    """32x32 desk configuration used by generator, discriminator and training tests."""
    return desk_model_config(32)


_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Recorder for criterion outcomes; lines are echoed live and repeated in the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, [])

    def record(number, title, ok, detail, elapsed, budget):
        within = elapsed <= budget
        status = "PASS" if ok and within else "FAIL"
        line = f"[acceptance {number:>2}] {status}  {title}: {detail} ({elapsed:.2f}s, budget {budget:g}s)"
        lines.append((number, line))
        print(line)
        assert within, f"criterion {number} exceeded its runtime budget"
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
