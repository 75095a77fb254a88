"""
Desk-scale curriculum experiment on a synthetic corpus.

Trains the three-stage curriculum and a full-page-only baseline with the
same total epoch budget, then scores both on held-out pages: CRR for the
transcripts, point-in-box precision/recall/F1 for the attention locations,
and the share of correctly read characters whose point lands in their box.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from .annotation_store import split_train_valid
from .augmentation import generate_erasure_set, save_generated
from .config import Config
from .curriculum import (
    EpochLog,
    StopRule,
    build_stage_manifest,
    make_multiline_crops,
    save_crops,
    save_manifest,
    save_train_log,
)
from .line_assembly import assemble_lines, transcript_of
from .metrics import evaluate_detections, evaluate_transcripts, save_report
from .models import (
    LINE_SEPARATOR,
    CharBox,
    CodepointMap,
    CurriculumManifest,
    EvalReport,
    ManifestEntry,
    PageAnnotation,
    PointPrediction,
    SampleKind,
)
from .recognizer import ModelParams, Recognizer, read_characters, save_params, train
from .seeding import derive_seed
from .synthcorpus import SynthPage, gen_corpus, write_corpus

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass
class HeldOutScore:
    """Scores of one trained model on the held-out pages."""

    transcripts: EvalReport
    detections: EvalReport
    located: int = 0
    correct: int = 0

    @property
    def crr(self) -> float:
        return self.transcripts.crr

    @property
    def hit_rate(self) -> float:
        return self.located / self.correct if self.correct else 0.0


@dataclass
class DeskReport:
    curriculum: HeldOutScore
    baseline: HeldOutScore
    epoch_budget: int
    curriculum_log: List[EpochLog] = field(default_factory=list)
    baseline_log: List[EpochLog] = field(default_factory=list)

    def summary(self) -> str:
        lines = [f"epochs {self.epoch_budget}"]
        for name, score in (("curriculum", self.curriculum), ("baseline", self.baseline)):
            det = score.detections
            lines.append(
                f"{name} CRR {score.crr:.2f} P {det.precision:.4f} R {det.recall:.4f} "
                f"F1 {det.f1:.4f} hit {score.hit_rate:.4f}"
            )
        return "\n".join(lines)


def full_page_entry(page: SynthPage, image_path: Path, cmap: CodepointMap, threshold: float) -> ManifestEntry:
    lines = assemble_lines(page.annotation, threshold)
    return ManifestEntry(
        sample_id=page.annotation.image_id,
        kind=SampleKind.FULL_PAGE,
        image_path=str(image_path),
        transcript=transcript_of(page.annotation, lines, cmap).flat,
    )


def reading_order_boxes(page: PageAnnotation, threshold: float) -> List[CharBox]:
    return [page.boxes[i] for line in assemble_lines(page, threshold) for i in line.box_indices]


def score_held_out(
    model: Recognizer,
    pages: Sequence[SynthPage],
    cmap: CodepointMap,
    threshold: float,
    max_len: int,
    literal: bool = False,
    include_separator: bool = True,
) -> HeldOutScore:
    """
    Decode and locate every page.

    A character counts as correctly read when the decoded symbol at its
    position (separators skipped) equals the reference symbol there.
    """
    codepoints = cmap.inverse()
    refs: Dict[str, str] = {}
    hyps: Dict[str, str] = {}
    preds: Dict[str, List[PointPrediction]] = {}
    truth: Dict[str, Sequence[CharBox]] = {}
    located = correct = 0
    for page in pages:
        page_id = page.annotation.image_id
        ordered = reading_order_boxes(page.annotation, threshold)
        refs[page_id] = transcript_of(page.annotation, assemble_lines(page.annotation, threshold), cmap).flat
        result, points = read_characters(model, page.image, codepoints, max_len)
        hyps[page_id] = result.text
        preds[page_id] = points
        truth[page_id] = page.annotation.boxes
        ref_chars = refs[page_id].replace(LINE_SEPARATOR, "")
        hyp_chars = result.text.replace(LINE_SEPARATOR, "")
        for ref_ch, hyp_ch, box, point in zip(ref_chars, hyp_chars, ordered, points):
            if ref_ch == hyp_ch:
                correct += 1
                located += int(box.contains(point.x, point.y))
    return HeldOutScore(
        transcripts=evaluate_transcripts(refs, hyps, literal, include_separator),
        detections=evaluate_detections(preds, truth),
        located=located,
        correct=correct,
    )


def _build_samples(
    config: Config,
    pages: Sequence[SynthPage],
    corpus_dir: Path,
    out_dir: Path,
    cmap: CodepointMap,
    meta: Dict[str, str],
) -> Tuple[List[ManifestEntry], List[ManifestEntry], List[ManifestEntry]]:
    threshold = config.lines.overlap_threshold
    cur = config.curriculum
    crops: List[ManifestEntry] = []
    full: List[ManifestEntry] = []
    for page in pages:
        page_id = page.annotation.image_id
        lines = assemble_lines(page.annotation, threshold)
        page_crops = make_multiline_crops(
            page.image, page.annotation, lines, cur.group_min, cur.group_max,
            derive_seed(config.seed, "crops", page_id), cmap, cur.crop_margin,
        )
        crops += save_crops(out_dir / "crops", page_id, page_crops)
        full.append(full_page_entry(page, corpus_dir / "images" / f"{page_id}.png", cmap, threshold))

    records = generate_erasure_set(
        [(p.image, p.annotation) for p in pages], config.augmentation, cmap, threshold, config.jobs
    )
    paths = save_generated(out_dir / "generated", records, meta)
    generated = [
        ManifestEntry(sample_id=r.annotation.image_id, kind=SampleKind.GENERATED,
                      image_path=str(paths[r.annotation.image_id]), transcript=r.transcript.flat)
        for r in records
    ]
    return crops, full, generated


def run_desk_experiment(
    config: Config,
    out_dir: PathLike,
    n_train: Optional[int] = None,
    n_held_out: Optional[int] = None,
    progress: bool = False,
) -> DeskReport:
    """
    Generate the corpus, train curriculum and baseline, and score both.

    The first ``n_train`` pages are split 9:1 into training and validation
    (early stopping); the remaining ``n_held_out`` pages are only scored.
    Both counts, the per-stage epoch cap and the stop metric come from the
    ``experiment`` config section unless given.

    Raises:
        ValueError: fewer than 10 training pages or no held-out page
    """
    settings = config.experiment
    n_train = settings.train_pages if n_train is None else n_train
    n_held_out = settings.held_out if n_held_out is None else n_held_out
    if n_train < 10 or n_held_out < 1:
        raise ValueError("need at least 10 training pages (one for validation) and 1 held-out page")
    out_dir = Path(out_dir)
    meta = config.meta()
    threshold = config.lines.overlap_threshold
    hp = config.recognizer
    cur = config.curriculum

    corpus = gen_corpus(config.synth, n_train + n_held_out, config.jobs)
    corpus_dir = write_corpus(corpus, out_dir / "corpus", meta)
    train_pages, held_out = corpus.pages[:n_train], corpus.pages[n_train:]
    split = split_train_valid([p.annotation.image_id for p in train_pages], derive_seed(config.seed, "experiment"))
    by_id = {p.annotation.image_id: p for p in train_pages}
    fit_pages = [by_id[i] for i in split.train]
    valid = [
        full_page_entry(by_id[i], corpus_dir / "images" / f"{i}.png", corpus.cmap, threshold)
        for i in split.valid
    ]

    crops, full, generated = _build_samples(config, fit_pages, corpus_dir, out_dir, corpus.cmap, meta)
    manifests = [build_stage_manifest(stage, crops, full, generated) for stage in (1, 2, 3)]
    for manifest in manifests:
        save_manifest(out_dir / f"stage{manifest.stage}.manifest", manifest, meta)
    logger.info("stage sizes %s", [len(m) for m in manifests])

    stop = StopRule(patience=cur.patience, metric=settings.stop_metric, smoothing=cur.loss_smoothing)
    curriculum = train(manifests, valid, hp, stop=stop, max_epochs=settings.max_epochs, progress=progress)
    budget = len(curriculum.log)
    # Baseline: full pages only, from scratch, same number of epochs, no early stop
    baseline = train(CurriculumManifest(stage=2, entries=full), valid, hp,
                     init=ModelParams.init(hp, curriculum.params.vocab),
                     stop=StopRule(patience=max(1, budget)), max_epochs=max(1, budget), progress=progress)

    scores = []
    for name, result in (("curriculum", curriculum), ("baseline", baseline)):
        save_params(out_dir / f"{name}.ckpt", result.params, meta)
        save_train_log(out_dir / f"{name}.trainlog", result.log, meta)
        score = score_held_out(Recognizer(result.params, max_side=hp.max_side), held_out, corpus.cmap,
                               threshold, hp.max_decode_len, config.metrics.crr_literal,
                               config.metrics.include_separator)
        save_report(out_dir / f"{name}.crr.report", score.transcripts, meta)
        save_report(out_dir / f"{name}.f1.report", score.detections, meta)
        scores.append(score)

    report = DeskReport(curriculum=scores[0], baseline=scores[1], epoch_budget=budget,
                        curriculum_log=curriculum.log, baseline_log=baseline.log)
    logger.info("desk experiment finished:\n%s", report.summary())
    return report
