"""
Vertical line grouping and right-to-left reading order.

Boxes are visited by decreasing x-center. A box joins the line whose
horizontal extent it overlaps most, provided the overlap is at least
``overlap_threshold * min(box width, line width)``; otherwise it opens a new
line. Lines are then read right to left, members top to bottom.
"""

import logging
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

from .errors import CorruptArtifactError, ParseError
from .formats import escape_text, read_artifact, unescape_text, write_artifact
from .models import CodepointMap, PageAnnotation, PageTranscript, TextLine

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

DEFAULT_OVERLAP_THRESHOLD = 0.4


def make_line(page: PageAnnotation, indices: Sequence[int]) -> TextLine:
    """Build a TextLine from member indices, ordering members top to bottom."""
    boxes = page.boxes
    ordered = sorted(indices, key=lambda i: (boxes[i].y_center, -boxes[i].x_center, i))
    x0 = min(boxes[i].x for i in ordered)
    y0 = min(boxes[i].y for i in ordered)
    x1 = max(boxes[i].right for i in ordered)
    y1 = max(boxes[i].bottom for i in ordered)
    x_center = sum(boxes[i].x_center for i in ordered) / len(ordered)
    return TextLine(box_indices=tuple(ordered), line_bbox=(x0, y0, x1 - x0, y1 - y0), x_center=x_center)


def _reading_order_key(line: TextLine) -> Tuple[float, int, int]:
    return (-line.x_center, line.top, line.box_indices[0])


def assemble_lines(page: PageAnnotation, overlap_threshold: float = DEFAULT_OVERLAP_THRESHOLD) -> List[TextLine]:
    """
    Group a page's boxes into vertical lines in reading order.

    Args:
        page: validated page
        overlap_threshold: minimum horizontal overlap, as a fraction of the
            narrower of box and line, for a box to join a line

    Returns:
        Lines rightmost first; every box index appears in exactly one line
    """
    boxes = page.boxes
    if not boxes:
        return []

    visit = sorted(range(len(boxes)), key=lambda i: (-boxes[i].x_center, boxes[i].y_center, i))
    members: List[List[int]] = []
    extents: List[List[int]] = []  # [x0, x1] per line

    for i in visit:
        box = boxes[i]
        best, best_overlap = None, 0.0
        for k, (lx0, lx1) in enumerate(extents):
            overlap = min(box.right, lx1) - max(box.x, lx0)
            if overlap <= 0:
                continue
            if overlap >= overlap_threshold * min(box.w, lx1 - lx0) and overlap > best_overlap:
                best, best_overlap = k, overlap
        if best is None:
            members.append([i])
            extents.append([box.x, box.right])
        else:
            members[best].append(i)
            extents[best][0] = min(extents[best][0], box.x)
            extents[best][1] = max(extents[best][1], box.right)

    lines = [make_line(page, m) for m in members]
    lines.sort(key=_reading_order_key)
    return lines


def check_partition(page: PageAnnotation, lines: Sequence[TextLine]) -> None:
    """Raise ValueError unless ``lines`` cover every box exactly once."""
    seen = [i for line in lines for i in line.box_indices]
    if sorted(seen) != list(range(len(page.boxes))):
        raise ValueError(
            f"lines of page {page.image_id} do not partition its {len(page.boxes)} boxes"
        )


def line_text(page: PageAnnotation, line: TextLine, cmap: CodepointMap) -> str:
    return "".join(cmap.char(page.boxes[i].codepoint, page.image_id) for i in line.box_indices)


def transcript_of(page: PageAnnotation, lines: Sequence[TextLine], cmap: CodepointMap) -> PageTranscript:
    """
    Map each line's codepoints to characters and join lines.

    Raises:
        UnknownTokenError: a codepoint is missing from ``cmap``
        ValueError: lines do not cover all boxes exactly once
    """
    check_partition(page, lines)
    return PageTranscript.from_lines(line_text(page, line, cmap) for line in lines)


def page_transcript(
    page: PageAnnotation, cmap: CodepointMap, overlap_threshold: float = DEFAULT_OVERLAP_THRESHOLD
) -> PageTranscript:
    return transcript_of(page, assemble_lines(page, overlap_threshold), cmap)


def save_lines(
    path: PathLike,
    pages_lines: Iterable[Tuple[str, Sequence[TextLine]]],
    meta: Optional[Dict[str, str]] = None,
) -> None:
    """Write ``#kforge-lines v1``: ``image_id<TAB>line_rank<TAB>idx,idx,...``."""
    records = []
    for image_id, lines in pages_lines:
        for rank, line in enumerate(lines):
            records.append(f"{image_id}\t{rank}\t{','.join(str(i) for i in line.box_indices)}")
    write_artifact(path, "lines", records, meta=meta, count_records=True)


def load_lines(path: PathLike, pages: Iterable[PageAnnotation]) -> Dict[str, List[TextLine]]:
    """Rebuild TextLines for ``pages`` from a line dump."""
    by_id = {p.image_id: p for p in pages}
    _, records = read_artifact(path, "lines")
    grouped: Dict[str, List[Tuple[int, int, List[int]]]] = {}
    for number, record in enumerate(records, start=1):
        try:
            image_id, rank, indices = record.split("\t")
            grouped.setdefault(image_id, []).append((int(rank), number, [int(i) for i in indices.split(",")]))
        except ValueError:
            raise CorruptArtifactError(f"{path} record {number}: malformed line record") from None
    out: Dict[str, List[TextLine]] = {}
    for image_id, ranked in grouped.items():
        if image_id not in by_id:
            raise CorruptArtifactError(f"{path}: lines for unknown page '{image_id}'")
        ranked.sort()
        if [r for r, _, _ in ranked] != list(range(len(ranked))):
            raise CorruptArtifactError(f"{path}: line ranks of page '{image_id}' are not 0..n-1")
        page = by_id[image_id]
        for _, number, idx in ranked:
            bad = [i for i in idx if not 0 <= i < len(page.boxes)]
            if bad:
                raise ParseError(f"box index {bad[0]} is out of range for page '{image_id}' "
                                 f"({len(page.boxes)} boxes)", str(path), number)
        out[image_id] = [make_line(page, idx) for _, _, idx in ranked]
    return out


def save_transcripts(
    path: PathLike, transcripts: Mapping[str, str], meta: Optional[Dict[str, str]] = None
) -> None:
    """Write ``#kforge-transcripts v1``: ``id<TAB>escaped flat transcript``."""
    records = [f"{sample_id}\t{escape_text(text)}" for sample_id, text in transcripts.items()]
    write_artifact(path, "transcripts", records, meta=meta, count_records=True)


def load_transcripts(path: PathLike) -> Dict[str, str]:
    _, records = read_artifact(path, "transcripts")
    out: Dict[str, str] = {}
    for number, record in enumerate(records, start=1):
        sample_id, sep, text = record.partition("\t")
        if not sep:
            raise CorruptArtifactError(f"{path} record {number}: missing tab")
        out[sample_id] = unescape_text(text)
    return out
