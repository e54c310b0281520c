import time

import numpy as np
import pytest
from PIL import Image

from dcpn.data import generate_synthetic_corpus


@pytest.fixture(scope="session")
def corpus():
    return generate_synthetic_corpus(5, 40, 32, 0)


@pytest.fixture
def image_tree(tmp_path):
    """Build ``root/<class>/<n>.png`` from a {class: [HxWx3 uint8 arrays]} mapping."""

    def build(classes):
        root = tmp_path / "images"
        for name, images in classes.items():
            d = root / name
            d.mkdir(parents=True)
            for i, arr in enumerate(images):
                Image.fromarray(arr).save(d / f"{i}.png")
        return root

    return build


def random_uint8(shape, seed=0):
    return np.random.default_rng(seed).integers(0, 256, size=shape, dtype=np.uint8)


_VERDICTS: list[str] = []


class _Criterion:
    def __init__(self, number, title):
        self.number, self.title = number, title

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        line = f"{status} criterion {self.number:>2}: {self.title} ({time.perf_counter() - self.start:.1f}s)"
        if exc is not None:
            line += f" :: {str(exc).splitlines()[0][:160] if str(exc) else exc_type.__name__}"
        print(line)
        _VERDICTS.append(line)
        return False


@pytest.fixture
def criterion():
    """Context manager that records one PASS/FAIL line per acceptance criterion."""
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
