"""
Random text-line erasure with background fill, left-right perspective skew
and elastic distortion.

Every operation returns an :class:`AugRecord` whose boxes and transcript
describe the returned image. Operations chain through ``parent``; the
provenance records the chain, the page seed and the erased line ranks so a
record can be regenerated exactly.

Geometry convention: pixel (row i, column j) covers [j, j+1) x [i, i+1);
box corners live on pixel edges, sampling happens at pixel centers.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .annotation_store import save_pages
from .config import AugmentationSpec
from .errors import AugmentationError, CorruptArtifactError, LayoutError
from .formats import read_artifact, write_artifact
from .imaging import write_png
from .line_assembly import DEFAULT_OVERLAP_THRESHOLD, assemble_lines, line_text, page_transcript
from .models import CharBox, CodepointMap, PageAnnotation, PageTranscript, Provenance, TextLine
from .parallel import parallel_map
from .seeding import page_seed

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

MAX_BACKGROUND_SAMPLES = 100_000

# Salts for the per-operation random streams of a page
_ERASE, _SKEW, _ELASTIC = 0, 1, 2


@dataclass
class AugRecord:
    """A derived page: pixels, surviving boxes, transcript and provenance."""

    image: np.ndarray
    annotation: PageAnnotation
    transcript: PageTranscript
    provenance: Provenance


def estimate_background(image: np.ndarray, page: PageAnnotation) -> Tuple[int, int, int]:
    """
    Per-channel median of pixels outside every character box.

    Pixels are sampled on a uniform grid of at most 1e5 points; when boxes
    cover the whole sample, the median over all sampled pixels is used.
    """
    height, width = image.shape[:2]
    step = max(1, math.ceil(math.sqrt(height * width / MAX_BACKGROUND_SAMPLES)))
    mask = np.ones((height, width), dtype=bool)
    for box in page.boxes:
        mask[box.y:box.bottom, box.x:box.right] = False
    sample = image[::step, ::step].reshape(-1, image.shape[2])
    outside = sample[mask[::step, ::step].reshape(-1)]
    if len(outside) == 0:
        outside = sample
    median = np.median(outside, axis=0)
    return tuple(int(v) for v in np.round(median))


def _transcript_for(
    page: PageAnnotation, cmap: Optional[CodepointMap], parent: Optional[AugRecord]
) -> PageTranscript:
    if parent is not None:
        return parent.transcript
    if cmap is None:
        raise ValueError("a codepoint map is required when no parent record is given")
    return page_transcript(page, cmap)


def _provenance_for(page: PageAnnotation, seed: int, parent: Optional[AugRecord]) -> Provenance:
    if parent is not None:
        return parent.provenance.model_copy(deep=True)
    return Provenance(source_id=page.image_id, seed=seed)


def _resolve_seed(spec: AugmentationSpec, page: PageAnnotation, seed: Optional[int],
                  parent: Optional[AugRecord]) -> int:
    if seed is not None:
        return seed
    if parent is not None:
        return parent.provenance.seed
    return page_seed(spec.seed, page.image_id)


def erase_lines(
    image: np.ndarray,
    page: PageAnnotation,
    lines: Sequence[TextLine],
    spec: AugmentationSpec,
    cmap: CodepointMap,
    *,
    seed: Optional[int] = None,
) -> AugRecord:
    """
    Erase k random lines from image and ground truth.

    k is uniform on {k_min..k_max}; the erased lines are a uniform k-subset.
    Each erased line's box, dilated by ``erase_margin``, is filled with the
    estimated background color. Surviving boxes keep their source order.

    Raises:
        LayoutError: page has no lines, or k_max exceeds the line count
    """
    if not lines:
        raise LayoutError(f"page {page.image_id} has no lines to erase")
    if spec.k_max > len(lines):
        raise LayoutError(
            f"k_max={spec.k_max} exceeds the {len(lines)} lines of page {page.image_id}"
        )
    seed = _resolve_seed(spec, page, seed, None)
    rng = np.random.default_rng([seed, _ERASE])
    k = int(rng.integers(spec.k_min, spec.k_max + 1))
    erased = sorted(int(r) for r in rng.choice(len(lines), size=k, replace=False))

    out = image.copy()
    if erased:
        color = np.array(estimate_background(image, page), dtype=np.uint8)
        height, width = image.shape[:2]
        m = spec.erase_margin
        for rank in erased:
            x, y, w, h = lines[rank].line_bbox
            out[max(0, y - m):min(height, y + h + m), max(0, x - m):min(width, x + w + m)] = color

    erased_set = set(erased)
    removed = {i for rank in erased for i in lines[rank].box_indices}
    kept = [box for i, box in enumerate(page.boxes) if i not in removed]
    transcript = PageTranscript.from_lines(
        line_text(page, line, cmap) for rank, line in enumerate(lines) if rank not in erased_set
    )
    return AugRecord(
        image=out,
        annotation=page.model_copy(update={"boxes": tuple(kept)}),
        transcript=transcript,
        provenance=Provenance(source_id=page.image_id, ops=[f"erase(k={k})"], seed=seed, erased_ranks=erased),
    )


def _warp_box(box: CharBox, mapping: Callable[[np.ndarray], np.ndarray], width: int, height: int) -> CharBox:
    """Map the four corners and take the tight rectangle, rounded to whole pixels."""
    mapped = mapping(np.array(box.corners(), dtype=np.float64))
    x0 = int(np.clip(np.round(mapped[:, 0].min()), 0, width - 1))
    y0 = int(np.clip(np.round(mapped[:, 1].min()), 0, height - 1))
    x1 = int(np.clip(np.round(mapped[:, 0].max()), x0 + 1, width))
    y1 = int(np.clip(np.round(mapped[:, 1].max()), y0 + 1, height))
    return CharBox(codepoint=box.codepoint, x=x0, y=y0, w=x1 - x0, h=y1 - y0)


def _sample(image: np.ndarray, rows: np.ndarray, cols: np.ndarray, fill: Sequence[int]) -> np.ndarray:
    """Bilinear sampling at pixel-index coordinates; outside the image reads ``fill``."""
    channels = []
    for c in range(image.shape[2]):
        channels.append(map_coordinates(
            image[:, :, c].astype(np.float64), [rows, cols], order=1, mode="constant", cval=float(fill[c])
        ))
    out = np.stack(channels, axis=-1)
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 projective map sending the four ``src`` points onto ``dst``."""
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for k, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        a[2 * k] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * k + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * k], b[2 * k + 1] = u, v
    h = np.linalg.solve(a, b)
    return np.append(h, 1.0).reshape(3, 3)


def apply_homography(matrix: np.ndarray, points: np.ndarray) -> np.ndarray:
    ones = np.ones((len(points), 1))
    projected = np.hstack([points, ones]) @ matrix.T
    return projected[:, :2] / projected[:, 2:3]


def skew_homography(width: int, height: int, theta_deg: float) -> np.ndarray:
    """
    Left-right perspective skew.

    For theta > 0 the left edge is stretched vertically so the top and bottom
    edges tilt by theta; theta < 0 stretches the right edge. The resulting
    quadrilateral is shrunk about the canvas center until it fits inside the
    canvas, so no content is cut off.
    """
    if theta_deg == 0:
        return np.eye(3)
    src = np.array([[0, 0], [width, 0], [width, height], [0, height]], dtype=np.float64)
    d = width * math.tan(math.radians(abs(theta_deg)))
    dst = src.copy()
    if theta_deg > 0:
        dst[0, 1] -= d
        dst[3, 1] += d
    else:
        dst[1, 1] -= d
        dst[2, 1] += d
    lo, hi = dst.min(axis=0), dst.max(axis=0)
    scale = min(1.0, width / (hi[0] - lo[0]), height / (hi[1] - lo[1]))
    center = (lo + hi) / 2.0
    dst = (dst - center) * scale + np.array([width / 2.0, height / 2.0])
    return homography(src, dst)


def skew_lr(
    image: np.ndarray,
    page: PageAnnotation,
    spec: AugmentationSpec,
    cmap: Optional[CodepointMap] = None,
    *,
    theta: Optional[float] = None,
    seed: Optional[int] = None,
    parent: Optional[AugRecord] = None,
) -> AugRecord:
    """
    Apply a random left-right perspective skew.

    Args:
        theta: skew angle in degrees; drawn uniform in [-skew_max_deg, skew_max_deg] when unset
        parent: record being extended (supplies transcript and provenance)
    """
    seed = _resolve_seed(spec, page, seed, parent)
    if theta is None:
        rng = np.random.default_rng([seed, _SKEW])
        theta = float(rng.uniform(-spec.skew_max_deg, spec.skew_max_deg))
    transcript = _transcript_for(page, cmap, parent)
    provenance = _provenance_for(page, seed, parent)
    provenance.ops.append(f"skew_lr(theta={theta:.6f})")

    height, width = image.shape[:2]
    matrix = skew_homography(width, height, theta)
    if theta == 0:
        return AugRecord(image.copy(), page, transcript, provenance)

    inverse = np.linalg.inv(matrix)
    rows, cols = np.mgrid[0:height, 0:width].astype(np.float64)
    centers = np.stack([cols.ravel() + 0.5, rows.ravel() + 0.5], axis=1)
    source = apply_homography(inverse, centers)
    fill = estimate_background(image, page)
    warped = _sample(
        image,
        (source[:, 1] - 0.5).reshape(height, width),
        (source[:, 0] - 0.5).reshape(height, width),
        fill,
    )
    boxes = tuple(_warp_box(b, lambda p: apply_homography(matrix, p), width, height) for b in page.boxes)
    return AugRecord(warped, page.model_copy(update={"boxes": boxes}), transcript, provenance)


def elastic_field(height: int, width: int, alpha: float, sigma: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Uniform noise in [-alpha, alpha], Gaussian-smoothed; returns (dx, dy)."""
    dx = gaussian_filter(rng.uniform(-1.0, 1.0, size=(height, width)) * alpha, sigma, mode="reflect")
    dy = gaussian_filter(rng.uniform(-1.0, 1.0, size=(height, width)) * alpha, sigma, mode="reflect")
    return dx, dy


def elastic_distort(
    image: np.ndarray,
    page: PageAnnotation,
    spec: AugmentationSpec,
    cmap: Optional[CodepointMap] = None,
    *,
    seed: Optional[int] = None,
    parent: Optional[AugRecord] = None,
) -> AugRecord:
    """
    Warp the page with a smooth random displacement field.

    Output pixel q samples the input at q + d(q); a box corner p therefore
    moves to p - d(p).
    """
    seed = _resolve_seed(spec, page, seed, parent)
    transcript = _transcript_for(page, cmap, parent)
    provenance = _provenance_for(page, seed, parent)
    provenance.ops.append(f"elastic(alpha={spec.elastic_alpha:g},sigma={spec.elastic_sigma:g})")
    if spec.elastic_alpha == 0:
        return AugRecord(image.copy(), page, transcript, provenance)

    height, width = image.shape[:2]
    rng = np.random.default_rng([seed, _ELASTIC])
    dx, dy = elastic_field(height, width, spec.elastic_alpha, spec.elastic_sigma, rng)
    rows, cols = np.mgrid[0:height, 0:width].astype(np.float64)
    warped = _sample(image, rows + dy, cols + dx, estimate_background(image, page))

    def move(points: np.ndarray) -> np.ndarray:
        coords = [points[:, 1] - 0.5, points[:, 0] - 0.5]
        fx = map_coordinates(dx, coords, order=1, mode="nearest")
        fy = map_coordinates(dy, coords, order=1, mode="nearest")
        return points - np.stack([fx, fy], axis=1)

    boxes = tuple(_warp_box(b, move, width, height) for b in page.boxes)
    return AugRecord(warped, page.model_copy(update={"boxes": boxes}), transcript, provenance)


def _clamped_spec(spec: AugmentationSpec, n_lines: int, image_id: str) -> AugmentationSpec:
    limit = max(0, n_lines - 1)
    if spec.k_max <= limit:
        return spec
    if spec.k_min > limit:
        logger.warning(
            "page %s has %d lines, fewer than k_min=%d; clamping k to %d",
            image_id, n_lines, spec.k_min, limit,
        )
    else:
        logger.debug("page %s has %d lines; clamping k_max=%d to %d", image_id, n_lines, spec.k_max, limit)
    return spec.model_copy(update={"k_min": min(spec.k_min, limit), "k_max": limit})


def generate_record(
    image: np.ndarray,
    page: PageAnnotation,
    spec: AugmentationSpec,
    cmap: CodepointMap,
    overlap_threshold: float = DEFAULT_OVERLAP_THRESHOLD,
) -> AugRecord:
    """
    Erase, then skew, then distort one page with its derived page seed.

    Raises:
        AugmentationError: the generated boxes no longer read as the kept lines
    """
    seed = page_seed(spec.seed, page.image_id)
    lines = assemble_lines(page, overlap_threshold)
    if lines:
        record = erase_lines(image, page, lines, _clamped_spec(spec, len(lines), page.image_id), cmap, seed=seed)
    else:
        logger.warning("page %s has no lines; passing it through without erasure", page.image_id)
        record = AugRecord(image.copy(), page, PageTranscript(),
                           Provenance(source_id=page.image_id, ops=["erase(k=0)"], seed=seed))
    if spec.enable_skew:
        record = skew_lr(record.image, record.annotation, spec, parent=record)
    if spec.enable_elastic:
        record = elastic_distort(record.image, record.annotation, spec, parent=record)

    record.annotation = record.annotation.model_copy(update={"image_id": f"{page.image_id}_gen"})
    height, width = record.image.shape[:2]
    if (record.annotation.width, record.annotation.height) != (width, height):
        raise AugmentationError(
            f"page {page.image_id}: generated image is {width}x{height}, its labels say "
            f"{record.annotation.width}x{record.annotation.height}"
        )
    check = page_transcript(record.annotation, cmap, overlap_threshold)
    if check != record.transcript:
        raise AugmentationError(
            f"page {page.image_id}: line assembly on the augmented boxes gives {check.flat!r}, "
            f"the kept lines read {record.transcript.flat!r}"
        )
    return record


def _generate_task(task) -> AugRecord:
    return generate_record(*task)


def generate_erasure_set(
    pages: Sequence[Tuple[np.ndarray, PageAnnotation]],
    spec: AugmentationSpec,
    cmap: CodepointMap,
    overlap_threshold: float = DEFAULT_OVERLAP_THRESHOLD,
    jobs: int = 1,
) -> List[AugRecord]:
    """
    One generated record per input page, in input order.

    Raises:
        ValueError: ``pages`` is empty
    """
    if not pages:
        raise ValueError("generate_erasure_set needs at least one page")
    tasks = [(image, page, spec, cmap, overlap_threshold) for image, page in pages]
    return parallel_map(_generate_task, tasks, jobs)


def provenance_record(prov: Provenance) -> str:
    ranks = ",".join(str(r) for r in prov.erased_ranks)
    return f"{prov.source_id}\t{'>'.join(prov.ops)}\t{prov.seed}\t{ranks}"


def save_provenance(path: PathLike, records: Sequence[AugRecord], meta: Optional[Dict[str, str]] = None) -> None:
    """Write ``#kforge-prov v1``: source id, op chain, seed, erased ranks."""
    write_artifact(path, "prov", (provenance_record(r.provenance) for r in records), meta=meta, count_records=True)


def load_provenance(path: PathLike) -> List[Provenance]:
    _, lines = read_artifact(path, "prov")
    out = []
    for number, line in enumerate(lines, start=1):
        fields = line.split("\t")
        if len(fields) != 4:
            raise CorruptArtifactError(f"{path} record {number}: expected 4 fields")
        source_id, ops, seed, ranks = fields
        try:
            out.append(Provenance(
                source_id=source_id,
                ops=ops.split(">") if ops else [],
                seed=int(seed),
                erased_ranks=[int(r) for r in ranks.split(",")] if ranks else [],
            ))
        except ValueError as e:
            raise CorruptArtifactError(f"{path} record {number}: {e}") from None
    return out


def save_generated(
    out_dir: PathLike, records: Sequence[AugRecord], meta: Optional[Dict[str, str]] = None
) -> Dict[str, Path]:
    """
    Write generated images as PNG plus ``generated.pages`` and ``generated.prov`` sidecars.

    Returns:
        image path per generated image id
    """
    out_dir = Path(out_dir)
    paths = {}
    for record in records:
        path = out_dir / "images" / f"{record.annotation.image_id}.png"
        write_png(path, record.image)
        paths[record.annotation.image_id] = path
    save_pages(out_dir / "generated.pages", [r.annotation for r in records], meta=meta)
    save_provenance(out_dir / "generated.prov", records, meta=meta)
    return paths
