"""
Synthetic vertical-text pages with procedural glyphs.

Glyphs are stroke programs (lines and arcs in a unit cell) drawn with Pillow
and assigned private-use codepoints from U+E000. Columns run right to left,
characters top to bottom, each with a small positional jitter. The generator
records the true reading order and every character's ink mask so layout,
augmentation and location tests have an exact oracle.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, ImageDraw
from pydantic import BaseModel, Field

from .annotation_store import save_split, split_train_valid, write_annotation_table, write_codepoint_map
from .config import CorpusParams
from .errors import CorruptArtifactError, LayoutError
from .formats import read_artifact, write_artifact
from .imaging import write_png
from .models import CharBox, CodepointMap, DatasetSplit, PageAnnotation
from .parallel import parallel_map
from .seeding import derive_seed

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

PRIVATE_USE_BASE = 0xE000
MAX_GLYPH_IOU = 0.6
MAX_GLYPH_TRIES = 2000


class Stroke(BaseModel):
    """A line (x0, y0, x1, y1) or an arc (cx, cy, r, start_deg, end_deg) in the unit cell."""

    kind: str = Field(pattern="^(line|arc)$")
    params: Tuple[float, ...]


class GlyphSpec(BaseModel):
    glyph_id: int
    codepoint: int
    strokes: List[Stroke]
    nominal_size: int


def render_glyph(glyph: GlyphSpec, size: Optional[int] = None) -> np.ndarray:
    """Boolean ink mask of shape (size, size)."""
    size = size or glyph.nominal_size
    canvas = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(canvas)
    width = max(1, size // 8)
    scale = size - 1
    for stroke in glyph.strokes:
        if stroke.kind == "line":
            x0, y0, x1, y1 = (v * scale for v in stroke.params)
            draw.line([(x0, y0), (x1, y1)], fill=255, width=width)
        else:
            cx, cy, r, start, end = stroke.params
            bbox = [(cx - r) * scale, (cy - r) * scale, (cx + r) * scale, (cy + r) * scale]
            draw.arc(bbox, start=start, end=end, fill=255, width=width)
    return np.asarray(canvas) > 0


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 1.0


def _random_stroke(rng: np.random.Generator) -> Stroke:
    if rng.random() < 0.6:
        return Stroke(kind="line", params=tuple(float(v) for v in rng.uniform(0.1, 0.9, size=4)))
    r = float(rng.uniform(0.15, 0.35))
    cx, cy = (float(v) for v in rng.uniform(0.1 + r, 0.9 - r, size=2))
    start = float(rng.uniform(0, 360))
    return Stroke(kind="arc", params=(cx, cy, r, start, start + float(rng.uniform(90, 300))))


def _spans_middle(mask: np.ndarray) -> bool:
    """Ink reaches both the left and right quarter lines of the cell."""
    cols = np.nonzero(mask.any(axis=0))[0]
    quarter = mask.shape[1] // 4
    return bool(cols.size) and cols[0] <= quarter and cols[-1] >= mask.shape[1] - 1 - quarter


def build_alphabet(size: int, nominal_size: int, seed: int) -> List[GlyphSpec]:
    """
    ``size`` pairwise-distinct glyphs (rendered IoU below 0.6).

    Every glyph's ink spans the middle half of its cell horizontally, so the
    boxes of one column always overlap each other.

    Raises:
        LayoutError: could not find enough distinct glyphs
    """
    rng = np.random.default_rng([seed, 0xA1])
    glyphs: List[GlyphSpec] = []
    masks: List[np.ndarray] = []
    tries = 0
    while len(glyphs) < size:
        tries += 1
        if tries > MAX_GLYPH_TRIES:
            raise LayoutError(f"found only {len(glyphs)} distinct glyphs of {size} at {nominal_size}px")
        strokes = [_random_stroke(rng) for _ in range(int(rng.integers(2, 5)))]
        idx = len(glyphs)
        glyph = GlyphSpec(glyph_id=idx, codepoint=PRIVATE_USE_BASE + idx, strokes=strokes, nominal_size=nominal_size)
        mask = render_glyph(glyph)
        if mask.sum() < nominal_size or not _spans_middle(mask):
            continue
        if any(mask_iou(mask, other) >= MAX_GLYPH_IOU for other in masks):
            continue
        glyphs.append(glyph)
        masks.append(mask)
    return glyphs


def alphabet_map(alphabet: Sequence[GlyphSpec]) -> CodepointMap:
    return CodepointMap(entries={g.codepoint: chr(g.codepoint) for g in alphabet})


@dataclass
class InkMask:
    """A character's ink in page coordinates: top-left corner plus boolean mask."""

    x: int
    y: int
    mask: np.ndarray

    def centroid(self) -> Tuple[float, float]:
        ys, xs = np.nonzero(self.mask)
        return float(xs.mean() + self.x + 0.5), float(ys.mean() + self.y + 0.5)

    def bbox(self) -> Tuple[int, int, int, int]:
        ys, xs = np.nonzero(self.mask)
        return int(self.x + xs.min()), int(self.y + ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1)


@dataclass
class SynthPage:
    image: np.ndarray
    annotation: PageAnnotation
    reading_order: List[List[int]]
    ink_masks: List[InkMask]
    background: Tuple[int, int, int]


@dataclass
class SynthCorpus:
    pages: List[SynthPage]
    split: DatasetSplit
    cmap: CodepointMap
    alphabet: List[GlyphSpec] = field(default_factory=list)


def gen_page(
    params: CorpusParams,
    seed: int,
    image_id: str = "synth-page",
    alphabet: Optional[Sequence[GlyphSpec]] = None,
) -> SynthPage:
    """
    Render one page.

    Raises:
        LayoutError: the sampled layout does not fit the page
    """
    if alphabet is None:
        alphabet = build_alphabet(params.alphabet_size, params.glyph_size, params.seed)
    rng = np.random.default_rng(seed)
    n_lines = int(rng.integers(params.lines_min, params.lines_max + 1))
    counts = [int(c) for c in rng.integers(params.chars_min, params.chars_max + 1, size=n_lines)]
    gaps = [int(g) for g in rng.integers(params.column_gap_min, params.column_gap_max + 1, size=max(0, n_lines - 1))]

    col_w = params.column_width
    pitch = col_w + params.char_gap
    need_w = 2 * params.margin + n_lines * col_w + sum(gaps)
    need_h = 2 * params.margin + max(counts) * pitch - params.char_gap
    if need_w > params.page_width or need_h > params.page_height:
        raise LayoutError(
            f"layout of {n_lines} lines x {max(counts)} chars needs {need_w}x{need_h}px, "
            f"page is {params.page_width}x{params.page_height}"
        )

    h, w = params.page_height, params.page_width
    noise = rng.integers(-params.noise_level, params.noise_level + 1, size=(h, w, 3))
    image = np.clip(np.array(params.background, dtype=np.int64) + noise, 0, 255).astype(np.uint8)
    ink = np.array(params.ink, dtype=np.uint8)

    placed: List[Tuple[CharBox, InkMask]] = []
    order_by_line: List[List[int]] = []
    x_right = w - params.margin
    for line_no, count in enumerate(counts):
        col_x = x_right - col_w
        line_members = []
        for j in range(count):
            glyph = alphabet[int(rng.integers(0, len(alphabet)))]
            jx = int(np.round(rng.uniform(-params.jitter_x, params.jitter_x)))
            jy = int(np.round(rng.uniform(-params.jitter_y, params.jitter_y)))
            gx = col_x + params.box_pad + jx
            gy = params.margin + j * pitch + params.box_pad + jy
            mask = render_glyph(glyph, params.glyph_size)
            ys, xs = np.nonzero(mask)
            image[gy + ys, gx + xs] = ink
            ink_mask = InkMask(gx, gy, mask)
            bx, by, bw, bh = ink_mask.bbox()
            x0, y0 = max(0, bx - params.box_pad), max(0, by - params.box_pad)
            x1, y1 = min(w, bx + bw + params.box_pad), min(h, by + bh + params.box_pad)
            box = CharBox(codepoint=glyph.codepoint, x=x0, y=y0, w=x1 - x0, h=y1 - y0)
            line_members.append(len(placed))
            placed.append((box, ink_mask))
        order_by_line.append(line_members)
        if line_no < len(gaps):
            x_right = col_x - gaps[line_no]

    # Annotation boxes in shuffled source order; reading order maps through the permutation
    perm = rng.permutation(len(placed))
    position = {int(src): pos for pos, src in enumerate(perm)}
    boxes = [placed[int(src)][0] for src in perm]
    masks = [placed[int(src)][1] for src in perm]
    reading_order = [[position[i] for i in line] for line in order_by_line]
    page = PageAnnotation(image_id=image_id, width=w, height=h, boxes=boxes)
    return SynthPage(image=image, annotation=page, reading_order=reading_order,
                     ink_masks=masks, background=tuple(params.background))


def _page_task(task) -> SynthPage:
    params, seed, image_id, alphabet = task
    return gen_page(params, seed, image_id, alphabet)


def page_id(index: int) -> str:
    return f"synth-{index:05d}"


def gen_corpus(params: CorpusParams, n_pages: int, jobs: int = 1) -> SynthCorpus:
    """
    ``n_pages`` independent pages plus a seeded 9:1 split.

    Raises:
        ValueError: ``n_pages`` < 1
    """
    if n_pages < 1:
        raise ValueError("n_pages must be at least 1")
    alphabet = build_alphabet(params.alphabet_size, params.glyph_size, params.seed)
    tasks = [(params, derive_seed(params.seed, "page", i), page_id(i), alphabet) for i in range(n_pages)]
    pages = parallel_map(_page_task, tasks, jobs)
    split = split_train_valid([p.annotation.image_id for p in pages], derive_seed(params.seed, "split"))
    return SynthCorpus(pages=pages, split=split, cmap=alphabet_map(alphabet), alphabet=alphabet)


def _oracle_record(page: SynthPage) -> str:
    order = ";".join(",".join(str(i) for i in line) for line in page.reading_order)
    masks = ",".join("{}:{}:{}:{}".format(*m.bbox()) for m in page.ink_masks)
    color = ",".join(str(c) for c in page.background)
    return f"{page.annotation.image_id}\t{order}\t{masks}\t{color}"


def write_corpus(corpus: SynthCorpus, out_dir: PathLike, meta: Optional[Dict[str, str]] = None) -> Path:
    """
    Write the corpus in competition layout.

    ``images/<id>.png``, ``train.csv``, ``unicode_translation.csv``,
    ``split.tsv`` and the ``oracle.tsv`` sidecar.
    """
    out_dir = Path(out_dir)
    for page in corpus.pages:
        write_png(out_dir / "images" / f"{page.annotation.image_id}.png", page.image)
    write_annotation_table(out_dir / "train.csv", [p.annotation for p in corpus.pages])
    write_codepoint_map(out_dir / "unicode_translation.csv", corpus.cmap)
    save_split(out_dir / "split.tsv", corpus.split, meta=meta)
    write_artifact(out_dir / "oracle.tsv", "oracle", (_oracle_record(p) for p in corpus.pages),
                   meta=meta, count_records=True)
    logger.info("wrote %d synthetic pages to %s", len(corpus.pages), out_dir)
    return out_dir


def load_oracle(path: PathLike) -> Dict[str, Dict[str, object]]:
    """``image_id -> {"reading_order", "mask_boxes", "background"}``."""
    _, records = read_artifact(path, "oracle")
    out: Dict[str, Dict[str, object]] = {}
    for number, record in enumerate(records, start=1):
        try:
            image_id, order, masks, color = record.split("\t")
            out[image_id] = {
                "reading_order": [[int(i) for i in line.split(",")] for line in order.split(";") if line],
                "mask_boxes": [tuple(int(v) for v in m.split(":")) for m in masks.split(",") if m],
                "background": tuple(int(c) for c in color.split(",")),
            }
        except ValueError:
            raise CorruptArtifactError(f"{path} record {number}: malformed oracle record") from None
    return out
