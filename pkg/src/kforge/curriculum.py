"""
Curriculum stages and the stage-by-stage training schedule.

Stage 1 trains on multi-line crops, stage 2 adds full pages, stage 3 adds
generated pages. Each stage warm-starts from the previous stage's best
checkpoint and stops when validation CRR (or the smoothed validation loss)
has not improved for ``patience`` epochs.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Literal, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

from .errors import CorruptArtifactError, DivergenceError
from .formats import escape_text, read_artifact, unescape_text, write_artifact
from .imaging import write_png
from .line_assembly import line_text
from .models import (
    CodepointMap,
    CurriculumManifest,
    ManifestEntry,
    PageAnnotation,
    PageTranscript,
    SampleKind,
    TextLine,
)
from .seeding import derive_seed

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

STAGE_KINDS = {
    1: {SampleKind.MULTILINE_CROP},
    2: {SampleKind.MULTILINE_CROP, SampleKind.FULL_PAGE},
    3: {SampleKind.MULTILINE_CROP, SampleKind.FULL_PAGE, SampleKind.GENERATED},
}


class StopRule(BaseModel):
    """
    Early stopping on validation CRR, or on the smoothed validation loss.

    With ``metric="valid_loss"`` the patience counter follows an exponential
    moving average of the teacher-forced validation loss, and only a drop
    larger than ``min_delta`` resets it. The kept checkpoint is still the
    one with the best validation CRR.
    """

    patience: int = Field(10, ge=1)
    metric: Literal["valid_crr", "valid_loss"] = "valid_crr"
    smoothing: float = Field(0.5, ge=0.0, lt=1.0)
    min_delta: float = Field(1e-3, ge=0.0)


class EpochLog(BaseModel):
    stage: int
    epoch: int
    loss: float
    valid_crr: float
    valid_loss: Optional[float] = None


@dataclass
class Crop:
    """A group of consecutive lines cut out of a page."""

    image: np.ndarray
    transcript: PageTranscript
    bbox: Tuple[int, int, int, int]
    line_ranks: List[int]


def make_multiline_crops(
    image: np.ndarray,
    page: PageAnnotation,
    lines: Sequence[TextLine],
    group_min: int,
    group_max: int,
    seed: int,
    cmap: CodepointMap,
    margin: int = 8,
) -> List[Crop]:
    """
    Partition lines, in reading order, into consecutive groups and crop each.

    Group sizes are uniform on {group_min..group_max} (the last group takes
    what is left). A crop is the union of its lines' boxes padded by
    ``margin`` and clipped to the image.

    Raises:
        ValueError: group bounds out of order or below 1
    """
    if not 1 <= group_min <= group_max:
        raise ValueError(f"need 1 <= group_min <= group_max, got {group_min}, {group_max}")
    if not lines:
        return []
    rng = np.random.default_rng(seed)
    height, width = image.shape[:2]
    crops = []
    start = 0
    while start < len(lines):
        size = int(rng.integers(group_min, group_max + 1))
        ranks = list(range(start, min(start + size, len(lines))))
        group = [lines[r] for r in ranks]
        x0 = max(0, min(ln.line_bbox[0] for ln in group) - margin)
        y0 = max(0, min(ln.line_bbox[1] for ln in group) - margin)
        x1 = min(width, max(ln.line_bbox[0] + ln.line_bbox[2] for ln in group) + margin)
        y1 = min(height, max(ln.line_bbox[1] + ln.line_bbox[3] for ln in group) + margin)
        crops.append(Crop(
            image=image[y0:y1, x0:x1].copy(),
            transcript=PageTranscript.from_lines(line_text(page, ln, cmap) for ln in group),
            bbox=(x0, y0, x1 - x0, y1 - y0),
            line_ranks=ranks,
        ))
        start = ranks[-1] + 1
    return crops


def save_crops(out_dir: PathLike, image_id: str, crops: Sequence[Crop]) -> List[ManifestEntry]:
    """Write ``<image_id>_c<NN>.png`` per crop; returns their sample entries."""
    entries = []
    for i, crop in enumerate(crops):
        sample_id = f"{image_id}_c{i:02d}"
        path = Path(out_dir) / f"{sample_id}.png"
        write_png(path, crop.image)
        entries.append(ManifestEntry(sample_id=sample_id, kind=SampleKind.MULTILINE_CROP,
                                     image_path=str(path), transcript=crop.transcript.flat))
    return entries


def build_stage_manifest(
    stage: int,
    crops: Sequence[ManifestEntry],
    full_pages: Sequence[ManifestEntry] = (),
    generated: Sequence[ManifestEntry] = (),
) -> CurriculumManifest:
    """
    Stage 1 = crops; stage 2 adds full pages; stage 3 adds generated pages.

    Raises:
        ValueError: stage outside {1, 2, 3}
    """
    if stage not in STAGE_KINDS:
        raise ValueError(f"stage must be 1, 2 or 3, got {stage}")
    entries = list(crops)
    if stage >= 2:
        entries += list(full_pages)
    if stage >= 3:
        entries += list(generated)
    manifest = CurriculumManifest(stage=stage, entries=entries)
    _check_kinds(manifest)
    return manifest


def _check_kinds(manifest: CurriculumManifest) -> None:
    allowed = STAGE_KINDS[manifest.stage]
    bad = {e.kind for e in manifest.entries} - allowed
    if bad:
        raise ValueError(
            f"stage {manifest.stage} manifest contains {', '.join(sorted(k.value for k in bad))} samples"
        )


def _entry_record(entry: ManifestEntry) -> str:
    return f"{entry.sample_id}\t{entry.kind.value}\t{entry.image_path}\t{escape_text(entry.transcript)}"


def _parse_entry(fields: Sequence[str], path: PathLike, number: int) -> ManifestEntry:
    sample_id, kind, image_path, transcript = fields
    try:
        return ManifestEntry(sample_id=sample_id, kind=SampleKind(kind), image_path=image_path,
                             transcript=unescape_text(transcript))
    except ValueError as e:
        raise CorruptArtifactError(f"{path} record {number}: {e}") from None


def save_manifest(path: PathLike, manifest: CurriculumManifest, meta: Optional[Dict[str, str]] = None) -> None:
    """``#kforge-manifest v1``: ``stage<TAB>sample_id<TAB>kind<TAB>image_path<TAB>transcript``."""
    records = (f"{manifest.stage}\t{_entry_record(e)}" for e in manifest.entries)
    write_artifact(path, "manifest", records, meta=meta, count_records=True)


def load_manifest(path: PathLike) -> CurriculumManifest:
    _, records = read_artifact(path, "manifest")
    stage, entries = None, []
    for number, record in enumerate(records, start=1):
        fields = record.split("\t")
        if len(fields) != 5:
            raise CorruptArtifactError(f"{path} record {number}: expected 5 fields, found {len(fields)}")
        if stage is None:
            stage = fields[0]
        elif fields[0] != stage:
            raise CorruptArtifactError(f"{path} record {number}: mixes stages {stage} and {fields[0]}")
        entries.append(_parse_entry(fields[1:], path, number))
    try:
        manifest = CurriculumManifest(stage=int(stage or 1), entries=entries)
    except ValueError as e:
        raise CorruptArtifactError(f"{path}: {e}") from None
    _check_kinds(manifest)
    return manifest


def save_samples(path: PathLike, entries: Sequence[ManifestEntry], meta: Optional[Dict[str, str]] = None) -> None:
    """Sample list that feeds stage manifests: ``#kforge-samples v1``."""
    write_artifact(path, "samples", (_entry_record(e) for e in entries), meta=meta, count_records=True)


def load_samples(path: PathLike) -> List[ManifestEntry]:
    _, records = read_artifact(path, "samples")
    entries = []
    for number, record in enumerate(records, start=1):
        fields = record.split("\t")
        if len(fields) != 4:
            raise CorruptArtifactError(f"{path} record {number}: expected 4 fields, found {len(fields)}")
        entries.append(_parse_entry(fields, path, number))
    return entries


class Trainer(Protocol):
    """What the schedule needs from a model trainer."""

    def reset_optimizer(self) -> None: ...

    def train_epoch(self, entries: Sequence[ManifestEntry], epoch_seed: int, epoch: int) -> float: ...

    def evaluate(self, valid: Sequence[ManifestEntry]) -> float: ...

    def validation_loss(self, valid: Sequence[ManifestEntry]) -> float: ...

    def snapshot(self) -> Any: ...

    def restore(self, snapshot: Any) -> None: ...


@dataclass
class StageResult:
    """Best checkpoint of one stage and its epoch history."""

    stage: int
    best_epoch: int
    best_crr: float
    checkpoint: Any
    history: List[EpochLog] = field(default_factory=list)
    diverged: bool = False


def run_stage(
    trainer: Trainer,
    manifest: CurriculumManifest,
    valid: Sequence[ManifestEntry],
    stop: StopRule,
    max_epochs: int = 100,
    seed: int = 0,
    on_epoch: Optional[Callable[[EpochLog], None]] = None,
) -> StageResult:
    """
    Train one stage with early stopping and leave the trainer at the stage's best parameters.

    The optimizer state is reset at the start of the stage. On a non-finite
    loss the stage is aborted and the last finite best checkpoint is kept;
    if no epoch finished, the stage's starting parameters are scored instead.
    """
    trainer.reset_optimizer()
    best_snapshot = trainer.snapshot()
    best_crr, best_epoch = -math.inf, 0
    best_watched, since_best = -math.inf, 0
    smoothed: Optional[float] = None
    history: List[EpochLog] = []
    diverged = False

    for epoch in range(1, max_epochs + 1):
        try:
            loss = trainer.train_epoch(manifest.entries, derive_seed(seed, "epoch", manifest.stage, epoch), epoch)
        except DivergenceError as e:
            logger.warning("stage %d aborted: %s; keeping epoch %d checkpoint", manifest.stage, e, best_epoch)
            diverged = True
            break
        crr_value = trainer.evaluate(valid)
        valid_loss = trainer.validation_loss(valid) if stop.metric == "valid_loss" else None
        log = EpochLog(stage=manifest.stage, epoch=epoch, loss=loss, valid_crr=crr_value, valid_loss=valid_loss)
        history.append(log)
        if on_epoch is not None:
            on_epoch(log)
        if crr_value > best_crr:
            best_crr, best_epoch = crr_value, epoch
            best_snapshot = trainer.snapshot()
        if valid_loss is None:
            logger.info("stage %d epoch %d loss %.4f valid CRR %.2f", manifest.stage, epoch, loss, crr_value)
            watched, tolerance = crr_value, 0.0
        else:
            smoothed = valid_loss if smoothed is None else stop.smoothing * smoothed + (1 - stop.smoothing) * valid_loss
            logger.info("stage %d epoch %d loss %.4f valid CRR %.2f valid loss %.4f (smoothed %.4f)",
                        manifest.stage, epoch, loss, crr_value, valid_loss, smoothed)
            watched, tolerance = -smoothed, stop.min_delta
        if watched > best_watched + tolerance:
            best_watched, since_best = watched, 0
        else:
            since_best += 1
            if since_best >= stop.patience:
                break

    trainer.restore(best_snapshot)
    if best_epoch == 0:
        best_crr = trainer.evaluate(valid)
    return StageResult(stage=manifest.stage, best_epoch=best_epoch, best_crr=best_crr,
                       checkpoint=best_snapshot, history=history, diverged=diverged)


def run_schedule(
    trainer: Trainer,
    manifests: Sequence[CurriculumManifest],
    valid: Sequence[ManifestEntry],
    stop: StopRule,
    max_epochs: int = 100,
    seed: int = 0,
    on_epoch: Optional[Callable[[EpochLog], None]] = None,
) -> List[StageResult]:
    """
    Run the stages in order; result ``i`` holds the best checkpoint S_{i+1}.

    Raises:
        ValueError: manifests not ordered 1, 2, 3 (a prefix is allowed)
    """
    stages = [m.stage for m in manifests]
    if stages != list(range(1, len(manifests) + 1)):
        raise ValueError(f"manifests must be ordered by stage starting at 1, got {stages}")
    results = []
    for manifest in manifests:
        results.append(run_stage(trainer, manifest, valid, stop, max_epochs, seed, on_epoch))
    return results


def save_train_log(path: PathLike, logs: Sequence[EpochLog], meta: Optional[Dict[str, str]] = None) -> None:
    """``#kforge-trainlog v1``: ``stage<TAB>epoch<TAB>loss<TAB>valid_crr``."""
    meta = dict(meta or {})
    meta["optimizer_reset"] = "stage"
    records = (f"{l.stage}\t{l.epoch}\t{l.loss:.6f}\t{l.valid_crr:.4f}" for l in logs)
    write_artifact(path, "trainlog", records, meta=meta)
