from __future__ import annotations

import numpy as np
import pytest
import torch

from paintmatch.cache import SemanticCache
from paintmatch.encoders import ProceduralBackbone
from paintmatch.synthetic import write_dataset


def square_outline() -> np.ndarray:
    """8x8 white canvas with a 1 px black outline around the central 4x4 block."""
    img = np.full((8, 8, 3), 255, np.uint8)
    img[2, 2:6] = img[5, 2:6] = 0
    img[2:6, 2] = img[2:6, 5] = 0
    return img


def random_lines(rng: np.random.Generator, h: int = 16, w: int = 16, density: float = 0.35,
                 colored: bool = False) -> np.ndarray:
    img = np.full((h, w, 3), 255, np.uint8)
    ink = rng.random((h, w)) < density
    if colored:
        img[ink] = rng.integers(0, 200, size=(int(ink.sum()), 3), dtype=np.uint8)
    else:
        img[ink] = 0
    return img


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    yield


@pytest.fixture(scope="session")
def backbone():
    return ProceduralBackbone()


@pytest.fixture
def memory_cache(backbone):
    return SemanticCache(None, backbone)


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    """1 train + 1 test character, one 3-frame clip each, 3 design sheets, 64 px."""
    root = tmp_path_factory.mktemp("toy")
    return write_dataset(root, seed=0, splits=(("train", 1), ("test", 1)), frames_per_clip=3,
                         sheet_size=3, size=64)


# one summary line per acceptance criterion, filled in by tests/test_acceptance.py
CRITERIA: dict[int, tuple[str, str]] = {}


def record_criterion(number: int, passed: bool | None, detail: str) -> None:
    status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
    CRITERIA[number] = (status, detail)
    print(f"criterion {number}: {status} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        status, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {detail}")
