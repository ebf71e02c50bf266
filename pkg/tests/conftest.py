import os
from pathlib import Path

import numpy as np
import pytest

_ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


class AcceptanceRecorder:
    def record(self, number: int, name: str, passed: bool, detail: str = "") -> bool:
        _ACCEPTANCE[number] = (name, bool(passed), detail)
        return bool(passed)


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceRecorder()


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        name, passed, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {number:2d}. {name}: {detail}")


def _find(directory: Path, stem: str):
    for name in (stem, stem + ".gz"):
        if (directory / name).exists():
            return directory / name
    return None


@pytest.fixture(scope="session")
def mnist_idx(tmp_path_factory):
    """``(images, labels, n_train, n_val)`` for the desk-scale run.

    ``CATEXPAND_MNIST_DIR`` may point at the official training files; otherwise
    the 5000-image subset shipped with mlxtend is converted to IDX.
    """
    from catexpand.mnist import write_idx

    env = os.environ.get("CATEXPAND_MNIST_DIR")
    if env:
        d = Path(env)
        images = _find(d, "train-images-idx3-ubyte")
        labels = _find(d, "train-labels-idx1-ubyte")
        if images is None or labels is None:
            pytest.fail(f"CATEXPAND_MNIST_DIR={env} lacks the training IDX files")
        return images, labels, 5000, 1000
    mlxtend_data = pytest.importorskip("mlxtend.data")
    X, y = mlxtend_data.mnist_data()
    d = tmp_path_factory.mktemp("mnist")
    write_idx(X.reshape(-1, 28, 28).astype(np.uint8), y.astype(np.uint8),
              d / "images.idx", d / "labels.idx")
    n_val = 1000
    return d / "images.idx", d / "labels.idx", min(5000, len(y) - n_val), n_val
