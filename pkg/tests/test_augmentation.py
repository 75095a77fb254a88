"""Tests for line erasure and geometric augmentation."""

import numpy as np
import pytest
from scipy.ndimage import map_coordinates

from kforge import augmentation
from kforge.augmentation import (
    apply_homography,
    elastic_distort,
    elastic_field,
    erase_lines,
    estimate_background,
    generate_erasure_set,
    generate_record,
    load_provenance,
    save_generated,
    save_provenance,
    skew_homography,
    skew_lr,
)
from kforge.annotation_store import load_pages
from kforge.config import AugmentationSpec, CorpusParams
from kforge.errors import AugmentationError, LayoutError
from kforge.line_assembly import assemble_lines, line_text, page_transcript
from kforge.models import PageTranscript
from kforge.synthcorpus import gen_corpus

from .conftest import make_page

A = ord("A")


@pytest.fixture(scope="module")
def corpus():
    """Three synthetic pages with exactly four lines each."""
    return gen_corpus(CorpusParams(seed=3, lines_min=4, lines_max=4), 3)


def test_erase_lines_keeps_image_and_labels_consistent(corpus):
    page = corpus.pages[0]
    lines = assemble_lines(page.annotation)

    record = erase_lines(page.image, page.annotation, lines, AugmentationSpec(seed=1), corpus.cmap)

    erased = record.provenance.erased_ranks
    assert 1 <= len(erased) <= 3
    removed = {i for rank in erased for i in lines[rank].box_indices}
    assert list(record.annotation.boxes) == [b for i, b in enumerate(page.annotation.boxes) if i not in removed]
    assert record.transcript == PageTranscript.from_lines(
        line_text(page.annotation, line, corpus.cmap) for rank, line in enumerate(lines) if rank not in erased
    )
    assert page_transcript(record.annotation, corpus.cmap) == record.transcript


def test_erased_regions_are_background(corpus):
    """Test that erased lines are painted within 5 levels of the true background."""
    page = corpus.pages[1]
    lines = assemble_lines(page.annotation)
    spec = AugmentationSpec(seed=2)

    record = erase_lines(page.image, page.annotation, lines, spec, corpus.cmap)

    untouched = np.ones(page.image.shape[:2], dtype=bool)
    for rank in record.provenance.erased_ranks:
        x, y, w, h = lines[rank].line_bbox
        m = spec.erase_margin
        region = record.image[max(0, y - m):y + h + m, max(0, x - m):x + w + m].reshape(-1, 3).astype(int)
        assert np.all(region == region[0])
        assert np.all(np.abs(region[0] - np.array(page.background)) <= 5)
        untouched[max(0, y - m):y + h + m, max(0, x - m):x + w + m] = False
    assert np.array_equal(record.image[untouched], page.image[untouched])


def test_erasure_regenerates_from_provenance(corpus):
    page = corpus.pages[2]
    lines = assemble_lines(page.annotation)
    spec = AugmentationSpec(seed=4)
    first = erase_lines(page.image, page.annotation, lines, spec, corpus.cmap)

    again = erase_lines(page.image, page.annotation, lines, spec, corpus.cmap, seed=first.provenance.seed)

    assert again.provenance == first.provenance
    assert np.array_equal(again.image, first.image)


def test_erase_lines_layout_errors(corpus, blank_image, ascii_map):
    page = corpus.pages[0]
    lines = assemble_lines(page.annotation)

    with pytest.raises(LayoutError, match="k_max=5"):
        erase_lines(page.image, page.annotation, lines, AugmentationSpec(k_min=1, k_max=5), corpus.cmap)
    with pytest.raises(LayoutError, match="no lines"):
        erase_lines(blank_image(), make_page([]), [], AugmentationSpec(), ascii_map)


def test_estimate_background_ignores_boxes(blank_image):
    image = blank_image(color=(200, 190, 150))
    image[10:60, 10:60] = 0
    page = make_page([(A, 10, 10, 50, 50)])

    assert estimate_background(image, page) == (200, 190, 150)
    assert estimate_background(image[10:60, 10:60], make_page([(A, 0, 0, 50, 50)], 50, 50)) == (0, 0, 0)


def test_skew_zero_is_identity(corpus):
    page = corpus.pages[0]

    record = skew_lr(page.image, page.annotation, AugmentationSpec(), corpus.cmap, theta=0.0)

    assert np.array_equal(record.image, page.image)
    assert record.annotation == page.annotation
    assert record.provenance.ops == ["skew_lr(theta=0.000000)"]


def test_skew_homography_corners():
    """Test the 45 degree map against corners worked out by hand."""
    matrix = skew_homography(100, 100, 45.0)
    corners = np.array([[0, 0], [100, 0], [100, 100], [0, 100]], dtype=float)

    mapped = apply_homography(matrix, corners)

    expected = np.array([[100 / 3, 0], [200 / 3, 100 / 3], [200 / 3, 200 / 3], [100 / 3, 100]])
    np.testing.assert_allclose(mapped, expected, atol=1e-6)


def test_skew_moves_ink_with_its_box(blank_image, ascii_map):
    image = blank_image(100, 100, color=(200, 200, 200))
    image[40:60, 40:60] = 0
    page = make_page([(A, 40, 40, 20, 20)], width=100, height=100)

    record = skew_lr(image, page, AugmentationSpec(), ascii_map, theta=10.0)

    (cx, cy), = apply_homography(skew_homography(100, 100, 10.0), np.array([[50.0, 50.0]]))
    assert record.image[int(cy), int(cx)].mean() < 60
    box = record.annotation.boxes[0]
    assert box.contains(cx, cy)
    assert 10 <= box.w <= 25 and 10 <= box.h <= 25
    corners = apply_homography(skew_homography(100, 100, 10.0), np.array(page.boxes[0].corners()))
    assert box.x == pytest.approx(corners[:, 0].min(), abs=0.5)
    assert box.bottom == pytest.approx(corners[:, 1].max(), abs=0.5)
    assert record.transcript.flat == "A"


def test_elastic_zero_alpha_is_identity(corpus):
    page = corpus.pages[0]

    record = elastic_distort(page.image, page.annotation, AugmentationSpec(elastic_alpha=0.0), corpus.cmap)

    assert np.array_equal(record.image, page.image)
    assert record.annotation == page.annotation


def test_elastic_is_seeded(corpus):
    page = corpus.pages[0]
    spec = AugmentationSpec(elastic_alpha=30.0, elastic_sigma=4.0)

    a = elastic_distort(page.image, page.annotation, spec, corpus.cmap, seed=1)
    b = elastic_distort(page.image, page.annotation, spec, corpus.cmap, seed=1)
    c = elastic_distort(page.image, page.annotation, spec, corpus.cmap, seed=2)

    assert np.array_equal(a.image, b.image)
    assert not np.array_equal(a.image, c.image)
    assert len(a.annotation.boxes) == len(page.annotation.boxes)
    assert [box.codepoint for box in a.annotation.boxes] == [box.codepoint for box in page.annotation.boxes]


def test_generate_record_chains_operations(corpus):
    page = corpus.pages[0]
    spec = AugmentationSpec(seed=9)

    record = generate_record(page.image, page.annotation, spec, corpus.cmap)

    assert record.annotation.image_id == f"{page.annotation.image_id}_gen"
    ops = record.provenance.ops
    assert [op.split("(")[0] for op in ops] == ["erase", "skew_lr", "elastic"]
    assert record.image.shape == page.image.shape
    assert record.transcript.char_count == len(record.annotation.boxes)


def test_generate_record_keeps_a_line(corpus):
    """Test that a two-line page never loses both lines."""
    small = gen_corpus(CorpusParams(seed=3, lines_min=2, lines_max=2), 1).pages[0]
    spec = AugmentationSpec(k_min=2, k_max=3, enable_skew=False, enable_elastic=False)

    record = generate_record(small.image, small.annotation, spec, corpus.cmap)

    assert len(record.provenance.erased_ranks) == 1
    assert record.transcript.lines


def test_generate_erasure_set(corpus, tmp_path):
    pages = [(p.image, p.annotation) for p in corpus.pages]
    spec = AugmentationSpec(seed=5)

    records = generate_erasure_set(pages, spec, corpus.cmap)
    paths = save_generated(tmp_path, records, {"config": "abc"})

    assert [r.provenance.source_id for r in records] == [p.annotation.image_id for p in corpus.pages]
    assert load_provenance(tmp_path / "generated.prov") == [r.provenance for r in records]
    assert load_pages(tmp_path / "generated.pages") == [r.annotation for r in records]
    assert all(path.exists() for path in paths.values())
    with pytest.raises(ValueError):
        generate_erasure_set([], spec, corpus.cmap)


def test_provenance_without_erasure(tmp_path, blank_image, ascii_map):
    record = generate_record(blank_image(), make_page([], image_id="empty"), AugmentationSpec(), ascii_map)

    save_provenance(tmp_path / "x.prov", [record])

    loaded, = load_provenance(tmp_path / "x.prov")
    assert loaded.erased_ranks == []
    assert loaded.ops[0] == "erase(k=0)"


def test_background_estimate_matches_generator(corpus):
    for page in corpus.pages:
        estimate = estimate_background(page.image, page.annotation)

        assert all(abs(e - b) <= 10 for e, b in zip(estimate, page.background))


def test_elastic_field_is_bounded():
    dx, dy = elastic_field(40, 30, alpha=4.0, sigma=2.0, rng=np.random.default_rng(0))

    assert dx.shape == (40, 30)
    assert np.abs(dx).max() <= 4.0 and np.abs(dy).max() <= 4.0


def test_elastic_keeps_ink_inside_its_box(mocker):
    """Test that displaced ink centroids stay in their displaced boxes for at least 95% of characters."""
    spy = mocker.spy(augmentation, "elastic_field")
    corpus = gen_corpus(CorpusParams(seed=5), 20)
    spec = AugmentationSpec(elastic_alpha=4.0, elastic_sigma=8.0)
    inside = total = 0

    for page in corpus.pages:
        record = elastic_distort(page.image, page.annotation, spec, corpus.cmap, seed=9)
        dx, dy = spy.spy_return
        for box, ink in zip(record.annotation.boxes, page.ink_masks):
            cx, cy = ink.centroid()
            coords = [[cy - 0.5], [cx - 0.5]]
            x = cx - map_coordinates(dx, coords, order=1, mode="nearest")[0]
            y = cy - map_coordinates(dy, coords, order=1, mode="nearest")[0]
            inside += box.contains(x, y)
            total += 1

    assert inside >= 0.95 * total


def test_erased_ranks_vary_across_pages():
    corpus = gen_corpus(CorpusParams(seed=8, lines_min=4, lines_max=4), 12)
    spec = AugmentationSpec(k_min=1, k_max=1, seed=4)

    records = generate_erasure_set([(p.image, p.annotation) for p in corpus.pages], spec, corpus.cmap)

    ranks = [tuple(r.provenance.erased_ranks) for r in records]
    assert all(len(r) == 1 for r in ranks)
    assert len(set(ranks)) > 1


@pytest.fixture(scope="module")
def hundred_pages():
    return gen_corpus(CorpusParams(seed=21), 100)


@pytest.mark.parametrize("index", range(100))
def test_chain_keeps_labels_and_background(hundred_pages, index):
    """Test erase, skew and elastic stage by stage on one page of a hundred."""
    page = hundred_pages.pages[index]
    cmap = hundred_pages.cmap
    spec = AugmentationSpec(k_min=1, k_max=2, seed=13)
    lines = assemble_lines(page.annotation)
    background = np.array(page.background)

    erased = erase_lines(page.image, page.annotation, lines, spec, cmap)
    assert page_transcript(erased.annotation, cmap) == erased.transcript
    for rank in erased.provenance.erased_ranks:
        x, y, w, h = lines[rank].line_bbox
        region = erased.image[y:y + h, x:x + w].reshape(-1, 3).astype(int)
        assert np.all(np.abs(region - background) <= 5)

    skewed = skew_lr(erased.image, erased.annotation, spec, parent=erased)
    assert skewed.image.shape == page.image.shape
    assert page_transcript(skewed.annotation, cmap) == skewed.transcript
    theta = float(skewed.provenance.ops[-1][len("skew_lr(theta="):-1])
    height, width = page.image.shape[:2]
    rows, cols = np.mgrid[0:height, 0:width].astype(np.float64)
    centers = np.stack([cols.ravel() + 0.5, rows.ravel() + 0.5], axis=1)
    source = apply_homography(np.linalg.inv(skew_homography(width, height, theta)), centers)
    outside = ((source[:, 0] < -1) | (source[:, 0] > width + 1)
               | (source[:, 1] < -1) | (source[:, 1] > height + 1))
    fill = skewed.image.reshape(-1, 3)[outside].astype(int)
    assert np.all(np.abs(fill - background) <= 5)

    distorted = elastic_distort(skewed.image, skewed.annotation, spec, parent=skewed)
    assert distorted.image.shape == page.image.shape
    assert page_transcript(distorted.annotation, cmap) == distorted.transcript
    assert [op.split("(")[0] for op in distorted.provenance.ops] == ["erase", "skew_lr", "elastic"]


def test_generate_record_rejects_mismatched_labels(corpus, mocker):
    page = corpus.pages[0]
    mocker.patch.object(augmentation, "page_transcript", return_value=PageTranscript.from_lines(["?"]))

    with pytest.raises(AugmentationError, match="line assembly"):
        generate_record(page.image, page.annotation, AugmentationSpec(seed=9), corpus.cmap)


def test_k_max_clamp_is_logged(caplog):
    three = gen_corpus(CorpusParams(seed=3, lines_min=3, lines_max=3), 1)
    small = three.pages[0]
    spec = AugmentationSpec(k_min=1, k_max=3, enable_skew=False, enable_elastic=False)

    with caplog.at_level("DEBUG", logger="kforge.augmentation"):
        record = generate_record(small.image, small.annotation, spec, three.cmap)

    assert len(record.provenance.erased_ranks) <= 2
    assert "clamping k_max=3 to 2" in caplog.text
