import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from oracles import write_digits_idx  # noqa: E402

MNIST_NAMES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte",
               "t10k-labels-idx1-ubyte")
MNIST_KEYS = ("train_images", "train_labels", "test_images", "test_labels")

_verdicts: dict = {}


REPO = Path(__file__).resolve().parents[1]


def mnist_paths():
    """``(root, paths)``: the four MNIST IDX files (plain or .gz) under
    $FGP_MNIST_DIR, default <repo>/data/mnist; ``paths`` is None if any is missing."""
    root = Path(os.environ.get("FGP_MNIST_DIR", REPO / "data" / "mnist"))
    found = {}
    for key, name in zip(MNIST_KEYS, MNIST_NAMES):
        for cand in (root / name, root / f"{name}.gz"):
            if cand.is_file():
                found[key] = cand
                break
        else:
            return root, None
    return root, found


@pytest.fixture(scope="session")
def mnist_idx():
    return mnist_paths()


@pytest.fixture(scope="session")
def digits_idx(tmp_path_factory):
    return write_digits_idx(tmp_path_factory.mktemp("digits"))


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion this test decides")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    n, title = mark.args
    if rep.when == "setup" and rep.passed:
        return
    detail = getattr(item, "detail", "")
    if rep.failed:
        msg = str(rep.longrepr.reprcrash.message) if hasattr(rep.longrepr, "reprcrash") else "error"
        detail = (detail + "; " if detail else "") + msg.splitlines()[0]
    _verdicts[n] = ("PASS" if rep.passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_verdicts):
        verdict, title, detail = _verdicts[n]
        terminalreporter.write_line(f"criterion {n:>2} {verdict}  {title}" + (f"  ({detail})" if detail else ""))
