import pytest

from vcfseq.phantom import make_dataset

BENCH_SEED = 42
BENCH_SERIES = 200


@pytest.fixture(scope="session")
def bench42(tmp_path_factory):
    """The standard phantom benchmark: 200 series, 33% positive, seed 42."""
    out = tmp_path_factory.mktemp("bench42")
    return make_dataset(out, BENCH_SERIES, 0.33, seed=BENCH_SEED)


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
