"""Tests for record models."""

import pytest
from pydantic import ValidationError

from kforge.errors import UnknownTokenError
from kforge.models import (
    CharBox,
    CodepointMap,
    CurriculumManifest,
    DatasetSplit,
    ManifestEntry,
    PageAnnotation,
    PageTranscript,
    PointPrediction,
    SampleKind,
)


def test_char_box_geometry():
    box = CharBox(codepoint=0x3042, x=10, y=20, w=4, h=6)

    assert box.label == "U+3042"
    assert (box.right, box.bottom) == (14, 26)
    assert (box.x_center, box.y_center) == (12.0, 23.0)
    assert box.corners() == [(10.0, 20.0), (14.0, 20.0), (10.0, 26.0), (14.0, 26.0)]


def test_char_box_contains_edges_inclusive():
    box = CharBox(codepoint=65, x=0, y=0, w=10, h=10)

    assert box.contains(0, 0)
    assert box.contains(10, 10)
    assert not box.contains(10.01, 5)


def test_char_box_rejects_empty_size():
    with pytest.raises(ValidationError):
        CharBox(codepoint=65, x=0, y=0, w=0, h=3)


def test_page_rejects_out_of_bounds_box():
    """Test that a box past the image edge fails validation."""
    with pytest.raises(ValidationError, match="exceeds image bounds"):
        PageAnnotation(image_id="p", width=10, height=10,
                       boxes=[CharBox(codepoint=65, x=5, y=5, w=6, h=2)])


def test_page_rejects_separator_in_id():
    with pytest.raises(ValidationError):
        PageAnnotation(image_id="a,b", width=10, height=10)


def test_codepoint_map_lookup():
    cmap = CodepointMap(entries={0x41: "A", 0x61: "A", 0x42: "B"})

    assert cmap.char(0x42) == "B"
    assert cmap.inverse() == {"A": 0x41, "B": 0x42}
    with pytest.raises(UnknownTokenError, match=r"U\+0043 on page p1"):
        cmap.char(0x43, "p1")


def test_split_must_be_disjoint():
    with pytest.raises(ValidationError, match="both train and valid"):
        DatasetSplit(train=["a", "b"], valid=["b"], seed=0)


def test_transcript_from_lines():
    transcript = PageTranscript.from_lines(["ab", "c"])

    assert transcript.flat == "ab\nc"
    assert transcript.char_count == 3
    with pytest.raises(ValidationError):
        PageTranscript(lines=("ab",), flat="ba")


def test_manifest_sample_ids():
    entries = [
        ManifestEntry(sample_id=f"s{i}", kind=SampleKind.MULTILINE_CROP, image_path=f"{i}.png", transcript="x")
        for i in range(3)
    ]
    manifest = CurriculumManifest(stage=1, entries=entries)

    assert len(manifest) == 3
    assert manifest.sample_ids() == ["s0", "s1", "s2"]
    with pytest.raises(ValidationError):
        CurriculumManifest(stage=4)


def test_point_prediction_must_be_finite():
    assert PointPrediction(codepoint=65, x=1.5, y=2.0).label == "U+0041"
    with pytest.raises(ValidationError):
        PointPrediction(codepoint=65, x=float("nan"), y=0.0)
    with pytest.raises(ValidationError):
        PointPrediction(codepoint=65, x=-1.0, y=0.0)
