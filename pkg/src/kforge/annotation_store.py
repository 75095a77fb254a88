"""
Competition-format annotation parsing, validation, persistence and splitting.
"""

import logging
import re
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .errors import CorruptArtifactError, LoadError, ParseError
from .formats import read_artifact, write_artifact
from .imaging import find_image, image_size
from .models import CharBox, CodepointMap, DatasetSplit, PageAnnotation, format_codepoint
from .parallel import parallel_map

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

ANNOTATION_HEADER = ["image_id", "labels"]
CODEPOINT_MAP_HEADER = ["Unicode", "char"]

_CODEPOINT_RE = re.compile(r"^U\+([0-9A-Fa-f]{1,6})$")
_PARSER_ROW_RE = re.compile(r"line (\d+)")


def parse_codepoint(token: str, source: Optional[str] = None, row: Optional[int] = None) -> int:
    """``"U+304B"`` -> 0x304B."""
    match = _CODEPOINT_RE.match(token)
    if not match:
        raise ParseError(f"malformed codepoint '{token}' (expected U+hex)", source, row)
    value = int(match.group(1), 16)
    if value > 0x10FFFF:
        raise ParseError(f"codepoint '{token}' is outside the Unicode range", source, row)
    return value


def _parse_int(token: str, what: str, source: str, row: int) -> int:
    try:
        return int(token)
    except ValueError:
        raise ParseError(f"non-integer {what} '{token}'", source, row) from None


def parse_labels(labels: str, source: str = "<labels>", row: int = 0) -> List[Tuple[int, int, int, int, int]]:
    """Split a ``labels`` cell into (codepoint, x, y, w, h) tuples."""
    tokens = labels.split()
    if len(tokens) % 5:
        raise ParseError(
            f"labels cell has {len(tokens)} tokens, not a multiple of 5 (codepoint x y w h)",
            source, row,
        )
    out = []
    for i in range(0, len(tokens), 5):
        cp = parse_codepoint(tokens[i], source, row)
        x, y, w, h = (
            _parse_int(tokens[i + j], name, source, row)
            for j, name in ((1, "x"), (2, "y"), (3, "w"), (4, "h"))
        )
        if w < 1 or h < 1:
            raise ParseError(f"box {format_codepoint(cp)} has non-positive size {w}x{h}", source, row)
        out.append((cp, x, y, w, h))
    return out


def clip_boxes(
    raw: Iterable[Tuple[int, int, int, int, int]], width: int, height: int, image_id: str
) -> List[CharBox]:
    """
    Clip boxes to the image, dropping any left with zero area.

    Both clipping and dropping are logged as warnings.
    """
    boxes = []
    for cp, x, y, w, h in raw:
        x0, y0 = max(0, x), max(0, y)
        x1, y1 = min(width, x + w), min(height, y + h)
        if x1 <= x0 or y1 <= y0:
            logger.warning(
                "page %s: dropping box %s %d,%d,%d,%d outside the %dx%d image",
                image_id, format_codepoint(cp), x, y, w, h, width, height,
            )
            continue
        if (x0, y0, x1, y1) != (x, y, x + w, y + h):
            logger.warning(
                "page %s: clipping box %s %d,%d,%d,%d to the %dx%d image",
                image_id, format_codepoint(cp), x, y, w, h, width, height,
            )
        boxes.append(CharBox(codepoint=cp, x=x0, y=y0, w=x1 - x0, h=y1 - y0))
    return boxes


def _parse_row(task) -> PageAnnotation:
    source, row, image_id, labels, image_dir, known = task
    raw = parse_labels(labels, source, row)
    if known is not None:
        for cp, *_ in raw:
            if cp not in known:
                raise ParseError(f"codepoint {format_codepoint(cp)} has no entry in the codepoint map", source, row)
    width, height = image_size(find_image(image_dir, image_id))
    return PageAnnotation(
        image_id=image_id,
        width=width,
        height=height,
        boxes=clip_boxes(raw, width, height, image_id),
    )


def read_table(path: PathLike, header: Sequence[str]) -> List[Tuple[int, List[str]]]:
    """
    Read a comma-separated table whose first row is ``header``.

    Returns:
        ``(row number, cells)`` per non-blank row; the header is row 1

    Raises:
        LoadError: missing or undecodable file
        ParseError: wrong header, or a row with more cells than the header
    """
    path = Path(path)
    try:
        frame = pd.read_csv(path, header=None, dtype=str, keep_default_na=False, encoding="utf-8-sig",
                            skip_blank_lines=False)
    except FileNotFoundError:
        raise LoadError(f"{path}: file not found") from None
    except pd.errors.EmptyDataError:
        return []
    except pd.errors.ParserError as e:
        found = _PARSER_ROW_RE.search(str(e))
        raise ParseError(f"malformed row ({' '.join(str(e).split())})", str(path),
                         int(found.group(1)) if found else None) from None
    except (OSError, UnicodeDecodeError) as e:
        raise LoadError(f"{path}: cannot read ({e})") from None
    rows = [list(cells) for cells in frame.fillna("").itertuples(index=False, name=None)]
    found = [cell.strip() for cell in rows[0]]
    if found != list(header):
        raise ParseError(f"expected header '{','.join(header)}', found '{','.join(found)}'", str(path), 1)
    return [(number, cells) for number, cells in enumerate(rows[1:], start=2) if any(cells)]


def write_table(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[str]]) -> None:
    """Write ``rows`` under ``header`` with ``\\n`` line endings."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(list(rows), columns=list(header)).to_csv(path, index=False, lineterminator="\n")


def parse_dataset(
    annotation_file: PathLike, image_dir: PathLike, jobs: int = 1, cmap: Optional[CodepointMap] = None
) -> List[PageAnnotation]:
    """
    Parse a competition ``image_id,labels`` table.

    Args:
        annotation_file: comma-separated table with header ``image_id,labels``
        image_dir: directory holding ``<image_id>.png|jpg``, read for dimensions
        jobs: worker processes for per-row parsing
        cmap: when given, every codepoint must have an entry in it

    Returns:
        One PageAnnotation per row, in file order

    Raises:
        ParseError: malformed row, codepoint or coordinate; duplicate image id; codepoint missing from ``cmap``
        LoadError: missing annotation file or image
    """
    source = str(annotation_file)
    known = frozenset(cmap.entries) if cmap is not None else None
    tasks = []
    seen: Dict[str, int] = {}
    for number, cells in read_table(annotation_file, ANNOTATION_HEADER):
        image_id, labels = cells[0].strip(), cells[1]
        if not image_id:
            raise ParseError("empty image_id", source, number)
        if image_id in seen:
            raise ParseError(f"duplicate image_id '{image_id}' (first seen at row {seen[image_id]})", source, number)
        seen[image_id] = number
        tasks.append((source, number, image_id, labels, str(image_dir), known))

    pages = parallel_map(_parse_row, tasks, jobs)
    logger.info("parsed %d pages, %d boxes from %s", len(pages), sum(len(p.boxes) for p in pages), source)
    return pages


def load_codepoint_map(map_file: PathLike) -> CodepointMap:
    """
    Load a ``Unicode,char`` translation table.

    Duplicate codepoints keep the last row and log a warning.
    """
    source = str(map_file)
    entries: Dict[int, str] = {}
    for number, cells in read_table(map_file, CODEPOINT_MAP_HEADER):
        cp = parse_codepoint(cells[0].strip(), source, number)
        if cp in entries:
            logger.warning("%s row %d: duplicate codepoint %s, keeping the last entry", source, number, cells[0])
        entries[cp] = cells[1]
    return CodepointMap(entries=entries)


def write_annotation_table(path: PathLike, pages: Iterable[PageAnnotation]) -> None:
    """Write pages in the competition ``image_id,labels`` layout."""
    rows = (
        (page.image_id, " ".join(f"{b.label} {b.x} {b.y} {b.w} {b.h}" for b in page.boxes))
        for page in pages
    )
    write_table(path, ANNOTATION_HEADER, rows)


def write_codepoint_map(path: PathLike, cmap: CodepointMap) -> None:
    write_table(path, CODEPOINT_MAP_HEADER, ((format_codepoint(cp), cmap.entries[cp]) for cp in sorted(cmap.entries)))


def split_train_valid(ids: Sequence[str], seed: int) -> DatasetSplit:
    """
    Seeded 9:1 split: shuffle with PCG64, the last floor(N/10) ids become valid.

    Raises:
        ValueError: empty or duplicate ids
    """
    ids = list(ids)
    if not ids:
        raise ValueError("cannot split an empty id list")
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise ValueError(f"duplicate ids in split input: {dupes[:5]}")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_valid = len(ids) // 10
    cut = len(ids) - n_valid
    return DatasetSplit(train=shuffled[:cut], valid=shuffled[cut:], seed=seed)


def save_split(path: PathLike, split: DatasetSplit, meta: Optional[Dict[str, str]] = None) -> None:
    meta = dict(meta or {})
    meta["split_seed"] = str(split.seed)
    records = [f"{i}\ttrain" for i in split.train] + [f"{i}\tvalid" for i in split.valid]
    write_artifact(path, "split", records, meta=meta, count_records=True)


def load_split(path: PathLike) -> DatasetSplit:
    meta, records = read_artifact(path, "split")
    train, valid = [], []
    for number, record in enumerate(records, start=1):
        image_id, _, side = record.partition("\t")
        if side == "train":
            train.append(image_id)
        elif side == "valid":
            valid.append(image_id)
        else:
            raise CorruptArtifactError(f"{path} record {number}: side '{side}' is not train/valid")
    try:
        seed = int(meta.get("split_seed", "0"))
    except ValueError:
        raise CorruptArtifactError(f"{path}: split_seed is not an integer") from None
    return DatasetSplit(train=train, valid=valid, seed=seed)


def _page_record(page: PageAnnotation) -> str:
    boxes = ",".join(f"{b.label}:{b.x}:{b.y}:{b.w}:{b.h}" for b in page.boxes)
    return f"{page.image_id}\t{page.width}\t{page.height}\t{boxes}"


def _parse_page_record(record: str, path: str, number: int) -> PageAnnotation:
    fields = record.split("\t")
    if len(fields) != 4:
        raise CorruptArtifactError(f"{path} record {number}: expected 4 fields, found {len(fields)}")
    image_id, width, height, box_field = fields
    try:
        boxes = []
        for token in box_field.split(",") if box_field else []:
            parts = token.split(":")
            if len(parts) != 5:
                raise ValueError(f"box token '{token}' does not have 5 parts")
            boxes.append(CharBox(
                codepoint=parse_codepoint(parts[0]),
                x=int(parts[1]), y=int(parts[2]), w=int(parts[3]), h=int(parts[4]),
            ))
        return PageAnnotation(image_id=image_id, width=int(width), height=int(height), boxes=boxes)
    except ValueError as e:
        raise CorruptArtifactError(f"{path} record {number}: {e}") from None


def save_pages(path: PathLike, pages: Iterable[PageAnnotation], meta: Optional[Dict[str, str]] = None) -> None:
    """Write pages in the canonical ``#kforge-pages v1`` format."""
    write_artifact(path, "pages", (_page_record(p) for p in pages), meta=meta, count_records=True)


def load_pages(path: PathLike) -> List[PageAnnotation]:
    """
    Read pages written by :func:`save_pages`.

    Raises:
        FormatVersionError: header names another kind or version
        CorruptArtifactError: bad record count or field; nothing is returned
    """
    _, records = read_artifact(path, "pages")
    return [_parse_page_record(r, str(path), n) for n, r in enumerate(records, start=1)]
