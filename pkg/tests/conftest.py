from pathlib import Path

import pytest

from spikegan.data import load_mnist
from spikegan.metrics import load_extractor, save_extractor, train_proxy_extractor

ROOT = Path(__file__).resolve().parents[1]
MNIST_DIR = ROOT / "data" / "mnist_5k"


@pytest.fixture(scope="session")
def mnist():
    return load_mnist(MNIST_DIR)


@pytest.fixture(scope="session")
def extractor_path(mnist, tmp_path_factory):
    """A proxy extractor trained once per session on the bundled MNIST subset."""
    model, accuracy = train_proxy_extractor(mnist, seed=0)
    path = tmp_path_factory.mktemp("extractor") / "extractor.ckpt"
    save_extractor(model, path, accuracy)
    return path


@pytest.fixture(scope="session")
def extractor(extractor_path):
    return load_extractor(extractor_path)


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import VERDICTS

    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[number])
