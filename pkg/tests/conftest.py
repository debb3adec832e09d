import numpy as np
import pytest
import torch

from flowsynth.nets import NetConfig

TOY = NetConfig(channel_widths=(8, 8, 16), time_embed_dim=16, norm_groups=4, head_channels=8)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def toy_config():
    return TOY


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one acceptance criterion as PASS/FAIL and print the line."""
    log = request.config.stash.setdefault(_CRITERIA, {})

    class _Recorder:
        def __init__(self):
            self.number = None

        def __call__(self, number, text):
            self.number, self.text = number, text
            log[number] = f"criterion {number}: FAIL  {text}"
            return self

        def note(self, detail):
            log[self.number] = f"criterion {self.number}: FAIL  {self.text}  [{detail}]"

        def passed(self, detail=""):
            line = f"criterion {self.number}: PASS  {self.text}" + (f"  [{detail}]" if detail else "")
            log[self.number] = line
            print(line)

    return _Recorder()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(_CRITERIA, {})
    if log:
        terminalreporter.section("acceptance criteria")
        for number in sorted(log):
            terminalreporter.write_line(log[number])
