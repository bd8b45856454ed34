import pytest

from mpq.fixtures import llama_graph, toy_transformer
from mpq.graphir import build_graph, partition_sequential
from mpq.sensitivity import FormatRegistry, FormatSpec, calibrate, default_registry


@pytest.fixture(scope="session")
def llama2():
    gd, ops = llama_graph(n_blocks=2)
    g = build_graph(gd)
    return g, partition_sequential(g)


@pytest.fixture(scope="session")
def toy():
    model, batch = toy_transformer()
    return model, batch, calibrate(model, batch)


@pytest.fixture(scope="session")
def fmts():
    return default_registry()


@pytest.fixture(scope="session")
def fmts_m8():
    return FormatRegistry([FormatSpec("bf16", 7, 2, is_baseline=True), FormatSpec("fp_m8", 8, 1)])


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one acceptance line for the terminal summary."""

    def record(n: int, ok: bool, detail: str) -> None:
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE[n] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
