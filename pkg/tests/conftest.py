"""Shared fixtures."""

from typing import Sequence, Tuple

import numpy as np
import pytest

from kforge.config import CorpusParams
from kforge.models import CharBox, CodepointMap, PageAnnotation


def make_page(boxes: Sequence[Tuple[int, int, int, int, int]], width: int = 200, height: int = 200,
              image_id: str = "page") -> PageAnnotation:
    """Page from ``(codepoint, x, y, w, h)`` tuples."""
    return PageAnnotation(
        image_id=image_id,
        width=width,
        height=height,
        boxes=[CharBox(codepoint=cp, x=x, y=y, w=w, h=h) for cp, x, y, w, h in boxes],
    )


def column(codepoints: Sequence[int], x: int, y0: int = 10, size: int = 10, gap: int = 4):
    """Box tuples of one vertical line, top to bottom."""
    return [(cp, x, y0 + i * (size + gap), size, size) for i, cp in enumerate(codepoints)]


@pytest.fixture
def ascii_map() -> CodepointMap:
    return CodepointMap(entries={cp: chr(cp) for cp in range(0x41, 0x5B)})


@pytest.fixture
def corpus_params() -> CorpusParams:
    return CorpusParams(seed=3)


@pytest.fixture
def blank_image():
    def _make(width: int = 200, height: int = 200, color=(220, 200, 170)) -> np.ndarray:
        image = np.empty((height, width, 3), dtype=np.uint8)
        image[:] = color
        return image

    return _make
