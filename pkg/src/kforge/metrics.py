"""
Transcription (CRR) and detection (precision/recall/F1) scoring.
"""

import logging
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

from .annotation_store import ANNOTATION_HEADER, parse_codepoint, read_table, write_table
from .errors import ParseError
from .formats import write_artifact
from .models import LINE_SEPARATOR, CharBox, EvalPair, EvalReport, PageScore, PointPrediction

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

RIGHT_CLASS_WRONG_PLACE = "right_class_wrong_place"
WRONG_CLASS_RIGHT_PLACE = "wrong_class_right_place"
OTHER_ERROR = "other"


def edit_distance(a: Sequence, b: Sequence) -> int:
    """
    Levenshtein distance with unit costs.

    Examples:
        edit_distance("", "abc") == 3
        edit_distance("abcd", "abcx") == 1
    """
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)

    previous = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        current = [i] + [0] * len(b)
        for j, cb in enumerate(b, start=1):
            cost = 0 if ca == cb else 1
            current[j] = min(previous[j] + 1, current[j - 1] + 1, previous[j - 1] + cost)
        previous = current
    return previous[-1]


def _strip_separator(text: str) -> str:
    return text.replace(LINE_SEPARATOR, "")


def crr(pairs: Sequence[EvalPair], literal: bool = False, include_separator: bool = True) -> float:
    """
    Character Recognition Rate in percent over a set of pairs.

    ``100 * (1 - sum(ED) / Z)`` with Z the total reference length; may be
    negative. With ``literal`` the unnormalized ``100 - sum(ED) / Z`` is
    returned instead.

    Raises:
        ValueError: Z == 0
    """
    total_ed, z = 0, 0
    for pair in pairs:
        target, hypothesis = pair.target, pair.hypothesis
        if not include_separator:
            target, hypothesis = _strip_separator(target), _strip_separator(hypothesis)
        total_ed += edit_distance(target, hypothesis)
        z += len(target)
    if z == 0:
        raise ValueError("CRR is undefined for an empty reference set (Z == 0)")
    if literal:
        return 100.0 - total_ed / z
    return 100.0 * (1.0 - total_ed / z)


def match_predictions(
    preds: Sequence[PointPrediction], gt: Sequence[CharBox]
) -> List[Tuple[int, int]]:
    """
    Greedy one-to-one point-in-box matching.

    Predictions are taken in input order; each claims the first unmatched gt
    box (input order) of the same codepoint that contains its point, edges
    inclusive.
    """
    taken = [False] * len(gt)
    matching = []
    for p_idx, pred in enumerate(preds):
        for g_idx, box in enumerate(gt):
            if taken[g_idx] or box.codepoint != pred.codepoint:
                continue
            if box.contains(pred.x, pred.y):
                taken[g_idx] = True
                matching.append((p_idx, g_idx))
                break
    return matching


def scores_from_counts(matched: int, predicted: int, ground_truth: int) -> Tuple[float, float, float]:
    precision = matched / predicted if predicted else 0.0
    recall = matched / ground_truth if ground_truth else 0.0
    if precision + recall == 0:
        return precision, recall, 0.0
    return precision, recall, 2 * precision * recall / (precision + recall)


def detection_scores(
    preds: Sequence[PointPrediction], gt: Sequence[CharBox]
) -> Tuple[float, float, float]:
    """(precision, recall, f1) for one page under greedy matching."""
    return scores_from_counts(len(match_predictions(preds, gt)), len(preds), len(gt))


def classify_errors(
    preds: Sequence[PointPrediction],
    gt: Sequence[CharBox],
    matching: Optional[Sequence[Tuple[int, int]]] = None,
) -> Dict[str, int]:
    """
    Count unmatched predictions by failure mode.

    ``wrong_class_right_place``: the point lies inside some gt box of another class.
    ``right_class_wrong_place``: the class occurs on the page, the point is in no box of it.
    ``other``: neither.
    """
    if matching is None:
        matching = match_predictions(preds, gt)
    matched_preds = {p for p, _ in matching}
    counts = {RIGHT_CLASS_WRONG_PLACE: 0, WRONG_CLASS_RIGHT_PLACE: 0, OTHER_ERROR: 0}
    classes = {box.codepoint for box in gt}
    for p_idx, pred in enumerate(preds):
        if p_idx in matched_preds:
            continue
        inside_other = any(
            box.codepoint != pred.codepoint and box.contains(pred.x, pred.y) for box in gt
        )
        if inside_other:
            counts[WRONG_CLASS_RIGHT_PLACE] += 1
        elif pred.codepoint in classes:
            counts[RIGHT_CLASS_WRONG_PLACE] += 1
        else:
            counts[OTHER_ERROR] += 1
    return counts


def evaluate_transcripts(
    references: Mapping[str, str],
    hypotheses: Mapping[str, str],
    literal: bool = False,
    include_separator: bool = True,
) -> EvalReport:
    """
    CRR over every reference id; a missing hypothesis counts as empty output.
    """
    pairs, rows = [], []
    for sample_id, target in references.items():
        hypothesis = hypotheses.get(sample_id)
        if hypothesis is None:
            logger.warning("no hypothesis for '%s', scoring it as empty", sample_id)
            hypothesis = ""
        pair = EvalPair(target=target, hypothesis=hypothesis, sample_id=sample_id)
        pairs.append(pair)
        s, h = (target, hypothesis) if include_separator else (_strip_separator(target), _strip_separator(hypothesis))
        rows.append(PageScore(sample_id=sample_id, edit_distance=edit_distance(s, h), target_length=len(s)))
    return EvalReport(crr=crr(pairs, literal, include_separator), pages=rows)


def evaluate_detections(
    predictions: Mapping[str, Sequence[PointPrediction]],
    ground_truth: Mapping[str, Sequence[CharBox]],
) -> EvalReport:
    """Aggregate precision/recall/F1 over pages; counts are summed before dividing."""
    rows = []
    errors = {RIGHT_CLASS_WRONG_PLACE: 0, WRONG_CLASS_RIGHT_PLACE: 0, OTHER_ERROR: 0}
    for sample_id, gt in ground_truth.items():
        preds = list(predictions.get(sample_id, ()))
        matching = match_predictions(preds, gt)
        for key, value in classify_errors(preds, gt, matching).items():
            errors[key] += value
        rows.append(PageScore(
            sample_id=sample_id, matched=len(matching), predicted=len(preds), ground_truth=len(gt)
        ))
    unknown = set(predictions) - set(ground_truth)
    if unknown:
        logger.warning("ignoring predictions for %d pages without ground truth", len(unknown))
    precision, recall, f1 = scores_from_counts(
        sum(r.matched for r in rows), sum(r.predicted for r in rows), sum(r.ground_truth for r in rows)
    )
    return EvalReport(precision=precision, recall=recall, f1=f1, pages=rows, error_types=errors)


def write_submission(path: PathLike, predictions: Mapping[str, Sequence[PointPrediction]]) -> None:
    """Write the ``image_id,labels`` prediction file (``codepoint x y`` triples)."""
    rows = (
        (image_id, " ".join(f"{p.label} {round(p.x)} {round(p.y)}" for p in preds))
        for image_id, preds in predictions.items()
    )
    write_table(path, ANNOTATION_HEADER, rows)


def read_submission(path: PathLike) -> Dict[str, List[PointPrediction]]:
    source = str(path)
    out: Dict[str, List[PointPrediction]] = {}
    for number, (image_id, labels) in read_table(path, ANNOTATION_HEADER):
        tokens = labels.split()
        if len(tokens) % 3:
            raise ParseError(f"labels cell has {len(tokens)} tokens, not a multiple of 3", source, number)
        preds = []
        for i in range(0, len(tokens), 3):
            try:
                x, y = float(tokens[i + 1]), float(tokens[i + 2])
            except ValueError:
                raise ParseError(f"non-numeric coordinate in '{' '.join(tokens[i:i + 3])}'", source, number) from None
            preds.append(PointPrediction(codepoint=parse_codepoint(tokens[i], source, number), x=x, y=y))
        out[image_id] = preds
    return out


def format_report_table(report: EvalReport) -> str:
    """Human-readable report: per-page rows followed by the totals."""
    lines = [f"{'id':<24} {'ED':>6} {'|s|':>6} {'match':>6} {'pred':>6} {'gt':>6}"]
    for row in report.pages:
        lines.append(
            f"{row.sample_id:<24} {row.edit_distance:>6} {row.target_length:>6} "
            f"{row.matched:>6} {row.predicted:>6} {row.ground_truth:>6}"
        )
    if report.crr is not None:
        lines.append(f"CRR {report.crr:.2f}")
    if report.f1 is not None:
        lines.append(f"P {report.precision:.4f} R {report.recall:.4f} F1 {report.f1:.4f}")
        for key in sorted(report.error_types):
            lines.append(f"{key} {report.error_types[key]}")
    return "\n".join(lines)


def save_report(path: PathLike, report: EvalReport, meta: Optional[Dict[str, str]] = None) -> None:
    """Machine-readable ``#kforge-report v1`` records."""
    records = [
        f"page\t{r.sample_id}\t{r.edit_distance}\t{r.target_length}\t{r.matched}\t{r.predicted}\t{r.ground_truth}"
        for r in report.pages
    ]
    if report.crr is not None:
        records.append(f"crr\t{report.crr:.6f}")
    if report.f1 is not None:
        records.append(f"detection\t{report.precision:.6f}\t{report.recall:.6f}\t{report.f1:.6f}")
        records.extend(f"error\t{k}\t{report.error_types[k]}" for k in sorted(report.error_types))
    write_artifact(path, "report", records, meta=meta)
