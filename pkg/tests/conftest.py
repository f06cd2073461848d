from pathlib import Path

import pytest

from decompnet.dataset import load_mnist_dir

DATA_DIR = Path(__file__).parent / "data"

# criterion number -> [title, passed so far, measured details]
_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


def _entry(item):
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return None
    number, title = mark.args
    return _CRITERIA.setdefault(number, [title, True, []])


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    entry = _entry(item)
    if entry is not None and (rep.when == "call" or rep.failed):
        entry[1] = entry[1] and rep.passed


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok, details = _CRITERIA[number]
        suffix = f" [{'; '.join(details)}]" if details else ""
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {title}{suffix}")


@pytest.fixture
def measured(request):
    """Attach a measured value to the criterion's summary line."""
    entry = _entry(request.node)

    def note(text):
        if entry is not None:
            entry[2].append(text)
        print(text)

    return note


@pytest.fixture(scope="session")
def mnist():
    return load_mnist_dir(DATA_DIR)["train"]
