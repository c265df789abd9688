import numpy as np
import pytest

from stochflash.fourier import GridSpec, KernelParams


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def kernel():
    return KernelParams()


@pytest.fixture
def g16():
    return GridSpec(16, 16, 8)


@pytest.fixture
def g32():
    return GridSpec(32, 32, 16)


def single_mode(g: GridSpec, amp: float, k: int = 1, comp: int = 1) -> np.ndarray:
    """Spectrum of ``v_comp = amp * cos(2 pi k x)``."""
    v = g.zeros()
    o = g.offset
    v[o + k, o, comp] = amp / 2
    v[o - k, o, comp] = amp / 2
    return v


ACCEPTANCE: list[str] = []


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    """Log one acceptance line (echoed immediately and again in the terminal summary)."""
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE.append(line)
    print("\n" + line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
