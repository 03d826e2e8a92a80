import numpy as np
import pytest

from dndrec import tensor as tn
from dndrec.dataset import Sample, pad_batch
from dndrec.model import ModelConfig, SessionModel


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def toy_model(encoder="gru4rec", decoder="linear", num_items=20, dim=8, seed=0, **kw):
    cfg = ModelConfig(encoder, decoder, num_items=num_items, emb_dim=dim, hidden=dim, **kw)
    return SessionModel.create(cfg, seed=seed)


def toy_batch(num_items=20, n=4, max_len=6, seed=0):
    g = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        length = int(g.integers(1, max_len + 1)) if i else max_len
        samples.append(Sample(tuple(g.integers(num_items, size=length).tolist()),
                              int(g.integers(num_items))))
    return pad_batch(samples, num_items)


@pytest.fixture(autouse=True)
def _grad_mode():
    # a failing no_grad block must not leak into later tests
    yield
    tn._grad_enabled = True


# ------------------------------------------------------- acceptance summary

_ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one PASS/FAIL line (SKIP for ``ok=None``)."""

    def record(number, ok: bool | None, detail: str) -> bool | None:
        status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
        line = f"criterion {number}: {status}  {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
