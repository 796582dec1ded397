import pytest

from normscale.harness.data import write_synthetic_corpus
from normscale.linalg import make_rng


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    path = tmp_path_factory.mktemp("corpus") / "corpus.txt"
    return write_synthetic_corpus(path, 700_000, seed=0)


def pytest_configure(config):
    config._criteria = []


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "_criteria", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """Time an acceptance criterion and record one PASS/FAIL line for the summary."""
    import contextlib
    import time

    @contextlib.contextmanager
    def run(name, budget_s):
        t0 = time.perf_counter()
        status = "FAIL"
        detail = ""
        try:
            yield
            elapsed = time.perf_counter() - t0
            if elapsed > budget_s:
                detail = f" over budget of {budget_s:g}s"
                raise AssertionError(f"{name} took {elapsed:.1f}s, budget {budget_s:g}s")
            status = "PASS"
        except BaseException as exc:
            detail = detail or f" {type(exc).__name__}"
            raise
        finally:
            elapsed = time.perf_counter() - t0
            line = f"{status} {name} ({elapsed:.1f}s){detail if status == 'FAIL' else ''}"
            request.config._criteria.append(line)
            print(line)

    return run
