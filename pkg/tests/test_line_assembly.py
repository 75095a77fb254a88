"""Tests for line grouping and reading order."""

import pytest

from kforge.config import CorpusParams
from kforge.errors import CorruptArtifactError, ParseError, UnknownTokenError
from kforge.line_assembly import (
    assemble_lines,
    check_partition,
    load_lines,
    load_transcripts,
    make_line,
    page_transcript,
    save_lines,
    save_transcripts,
    transcript_of,
)
from kforge.synthcorpus import gen_corpus

from .conftest import column, make_page

A, B, C, D, E = (ord(c) for c in "ABCDE")


def test_two_columns_read_right_to_left(ascii_map):
    """Test that the right column comes first, each read top to bottom."""
    right = column([A, B, C], x=120)
    left = column([D, E], x=60)
    # Source order deliberately scrambled
    page = make_page([left[1], right[2], right[0], left[0], right[1]])

    lines = assemble_lines(page)

    assert [line.box_indices for line in lines] == [(2, 4, 1), (3, 0)]
    assert page_transcript(page, ascii_map).flat == "ABC\nDE"


def test_jitter_does_not_split_a_column(ascii_map):
    boxes = [(A, 100, 10, 12, 12), (B, 102, 26, 10, 12), (C, 98, 42, 12, 12)]
    page = make_page(boxes)

    lines = assemble_lines(page)

    assert len(lines) == 1
    assert page_transcript(page, ascii_map).flat == "ABC"


def test_small_overlap_opens_new_line():
    """Test that boxes overlapping less than the threshold stay apart."""
    page = make_page([(A, 100, 10, 10, 10), (B, 93, 30, 10, 10)])

    assert len(assemble_lines(page, overlap_threshold=0.4)) == 2
    assert len(assemble_lines(page, overlap_threshold=0.2)) == 1


def test_box_joins_overlapping_line_to_its_left():
    page = make_page([(A, 100, 10, 10, 10), (B, 80, 10, 10, 10), (C, 86, 30, 10, 10)])

    lines = assemble_lines(page)

    assert [line.box_indices for line in lines] == [(0,), (1, 2)]


def test_empty_page():
    assert assemble_lines(make_page([])) == []


def test_lines_partition_boxes():
    page = make_page(column([A, B], x=20) + column([C, D, E], x=150) + column([A], x=90))

    lines = assemble_lines(page)

    check_partition(page, lines)
    assert sorted(i for line in lines for i in line.box_indices) == list(range(6))
    with pytest.raises(ValueError, match="partition"):
        check_partition(page, lines[:-1])


def test_line_geometry():
    page = make_page([(A, 10, 10, 10, 10), (B, 12, 30, 6, 8)])

    line = make_line(page, [1, 0])

    assert line.box_indices == (0, 1)
    assert line.line_bbox == (10, 10, 10, 28)
    assert line.x_center == pytest.approx(15.0)


def test_unknown_codepoint(ascii_map):
    page = make_page([(0x3042, 10, 10, 10, 10)], image_id="p7")

    with pytest.raises(UnknownTokenError, match="p7"):
        transcript_of(page, assemble_lines(page), ascii_map)


def test_synthetic_reading_order_matches_generator():
    """Test that assembled lines reproduce the generator's order on 100 pages."""
    corpus = gen_corpus(CorpusParams(seed=3), 100)

    mismatches = [
        page.annotation.image_id
        for page in corpus.pages
        if [list(line.box_indices) for line in assemble_lines(page.annotation)] != page.reading_order
    ]

    assert mismatches == []


def test_synthetic_reading_order_with_small_jitter():
    params = CorpusParams(seed=5, jitter_x=0.8, jitter_y=0.8)
    corpus = gen_corpus(params, 20)

    for page in corpus.pages:
        assert [list(line.box_indices) for line in assemble_lines(page.annotation)] == page.reading_order


def test_lines_file(tmp_path):
    pages = [
        make_page(column([A, B], x=120) + column([C], x=60), image_id="p1"),
        make_page(column([D], x=30), image_id="p2"),
    ]
    path = tmp_path / "pages.lines"
    save_lines(path, [(p.image_id, assemble_lines(p)) for p in pages], {"config": "abc"})

    loaded = load_lines(path, pages)

    assert loaded == {p.image_id: assemble_lines(p) for p in pages}


def test_lines_file_rejects_unknown_page(tmp_path):
    page = make_page(column([A], x=30), image_id="p1")
    path = tmp_path / "pages.lines"
    save_lines(path, [("p1", assemble_lines(page))])

    with pytest.raises(CorruptArtifactError, match="unknown page"):
        load_lines(path, [make_page([], image_id="other")])


def test_lines_file_rejects_box_index_past_page(tmp_path):
    page = make_page(column([A, B], x=30), image_id="p1")
    path = tmp_path / "pages.lines"
    save_lines(path, [("p1", assemble_lines(page))])

    with pytest.raises(ParseError, match=r"row 1: box index 1 is out of range for page 'p1' \(1 boxes\)"):
        load_lines(path, [make_page(column([A], x=30), image_id="p1")])


def test_transcripts_file_keeps_separators(tmp_path):
    path = tmp_path / "x.transcripts"
    transcripts = {"p1": "AB\nC", "p2": "tab\there", "p3": ""}

    save_transcripts(path, transcripts)

    assert load_transcripts(path) == transcripts
    assert "AB\\nC" in path.read_text(encoding="utf-8")
