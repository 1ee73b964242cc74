"""Shared fixtures and the acceptance-criterion summary printed at the end of a run."""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import pytest

from driftpatch.streams import LabeledImages

DEFAULT_MNIST = Path("/root/data/mnist")
CRITERIA: dict[int, tuple[bool, str]] = {}


def mnist_root() -> Path | None:
    root = Path(os.environ.get("DRIFTPATCH_DATA", DEFAULT_MNIST))
    return root if (root / "train-images-idx3-ubyte").exists() or (root / "train-images-idx3-ubyte.gz").exists() else None


@pytest.fixture(scope="session")
def mnist_dir() -> Path:
    root = mnist_root()
    if root is None:
        pytest.skip("MNIST IDX files not found; set DRIFTPATCH_DATA")
    return root


@pytest.fixture
def toy_pool() -> LabeledImages:
    """600 random 8x8 images, 60 per class, with a class-dependent bright row."""
    rng = np.random.default_rng(7)
    labels = np.repeat(np.arange(10), 60)
    images = rng.random((600, 8, 8), dtype=np.float32) * 0.2
    images[np.arange(600), labels % 8, :] = 1.0
    return LabeledImages(images, labels)


def record_criterion(number: int, passed: bool, detail: str) -> None:
    CRITERIA[number] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        passed, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
