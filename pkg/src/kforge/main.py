#!/usr/bin/env python3
"""
CLI entry point for kforge.

Every subcommand reads the effective configuration (file, environment,
``--set`` overrides) from the group and writes the config digest and master
seed into each artifact it produces.
"""

import logging
import sys
import traceback
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import click

from .annotation_store import (
    load_codepoint_map,
    load_pages,
    load_split,
    parse_dataset,
    save_pages,
    save_split,
    split_train_valid,
)
from .augmentation import generate_erasure_set, save_generated
from .config import Config
from .curriculum import (
    StopRule,
    build_stage_manifest,
    load_manifest,
    load_samples,
    make_multiline_crops,
    save_crops,
    save_manifest,
    save_samples,
    save_train_log,
)
from .dependencies import RunContext
from .errors import KforgeError
from .experiment import run_desk_experiment
from .imaging import IMAGE_SUFFIXES, find_image, read_image
from .line_assembly import assemble_lines, load_transcripts, save_lines, save_transcripts, transcript_of
from .metrics import (
    evaluate_detections,
    evaluate_transcripts,
    format_report_table,
    read_submission,
    save_report,
    write_submission,
)
from .models import CodepointMap, ManifestEntry, PageAnnotation, SampleKind
from .parallel import parallel_map
from .recognizer import (
    GRAD_CHECK_TOLERANCE,
    Recognizer,
    grad_check,
    load_params,
    read_characters,
    save_params,
    toy_problem,
    train,
)
from .seeding import derive_seed
from .synthcorpus import gen_corpus, write_corpus

logger = logging.getLogger("kforge")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _one_line(error: BaseException) -> str:
    return " ".join(str(error).split())


class KforgeGroup(click.Group):
    """Turns module errors into one ``error: <Class>: <message>`` line and exit status 1."""

    def invoke(self, ctx: click.Context):
        try:
            return super().invoke(ctx)
        except (KforgeError, ValueError, OSError) as e:
            click.echo(f"error: {type(e).__name__}: {_one_line(e)}", err=True)
            if ctx.obj is not None and ctx.obj.debug_mode:
                traceback.print_exc(file=sys.stderr)
            ctx.exit(1)


def _configure_logging(debug: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if debug else logging.WARNING,
        stream=sys.stderr,
        format=LOG_FORMAT,
        force=True,
    )


def _parse_overrides(items: Tuple[str, ...]) -> Dict[str, str]:
    overrides = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise click.BadParameter(f"expected KEY=VALUE, got '{item}'", param_hint="--set")
        overrides[key.strip()] = value.strip()
    return overrides


@click.group(cls=KforgeGroup, context_settings={"show_default": True})
@click.option("--config", "config_path", type=click.Path(dir_okay=False), envvar="KFORGE_CONFIG",
              help="key=value config file (sections as dotted prefixes)")
@click.option("--seed", type=int, default=None, help="Master seed (overrides config and KFORGE_SEED)")
@click.option("--jobs", type=int, default=None, help="Worker processes for page-parallel steps")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Override one config key")
@click.option("--debug", is_flag=True, help="Enable debug logging to stderr")
@click.option("--progress", is_flag=True, help="Show progress bars on stderr")
@click.pass_context
def main(
    ctx: click.Context,
    config_path: Optional[str],
    seed: Optional[int],
    jobs: Optional[int],
    overrides: Tuple[str, ...],
    debug: bool,
    progress: bool,
):
    """Kuzushiji dataset and training pipeline toolkit."""
    values = _parse_overrides(overrides)
    if seed is not None:
        values["seed"] = str(seed)
    if jobs is not None:
        values["jobs"] = str(jobs)

    try:
        config = Config(config_path, values)
    except ValueError as e:
        click.echo(f"Configuration error: {_one_line(e)}", err=True)
        sys.exit(1)

    debug = debug or config.debug_logging
    _configure_logging(debug)
    logger.debug("effective config %s: %s", config.digest(), config.as_dict())
    ctx.obj = RunContext(config=config, progress=progress, debug_mode=debug)


def _restrict(pages: List[PageAnnotation], split_path: Optional[str], side: str) -> List[PageAnnotation]:
    if not split_path:
        return pages
    split = load_split(split_path)
    keep = set(split.train if side == "train" else split.valid)
    return [p for p in pages if p.image_id in keep]


@main.command()
@click.option("--annotations", type=click.Path(exists=True, dir_okay=False), required=True,
              help="image_id,labels table")
@click.option("--images", "image_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--map", "map_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Unicode,char translation table")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.pass_obj
def ingest(run: RunContext, annotations: str, image_dir: str, map_path: str, out_dir: str):
    """Parse annotations and write pages.pages plus the seeded 9:1 split.tsv."""
    cmap = load_codepoint_map(map_path)
    pages = parse_dataset(annotations, image_dir, run.jobs, cmap)
    split = split_train_valid([p.image_id for p in pages], run.config.store.split_seed)
    out = Path(out_dir)
    save_pages(out / "pages.pages", pages, run.meta)
    save_split(out / "split.tsv", split, run.meta)
    click.echo(f"pages {len(pages)} train {len(split.train)} valid {len(split.valid)}")


def _lines_task(task):
    page, threshold = task
    return assemble_lines(page, threshold)


@main.command()
@click.option("--pages", "pages_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--map", "map_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out-lines", type=click.Path(dir_okay=False), required=True)
@click.option("--out-transcripts", type=click.Path(dir_okay=False), required=True)
@click.option("--images", "image_dir", type=click.Path(exists=True, file_okay=False), default=None,
              help="With --samples-out, where page images live")
@click.option("--samples-out", type=click.Path(dir_okay=False), default=None,
              help="Also write full-page samples for stage manifests")
@click.option("--split", "split_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Only pages on this side of the split")
@click.option("--side", type=click.Choice(["train", "valid"]), default="train")
@click.pass_obj
def lines(run: RunContext, pages_path: str, map_path: str, out_lines: str, out_transcripts: str,
          image_dir: Optional[str], samples_out: Optional[str], split_path: Optional[str], side: str):
    """Assemble text lines and page transcripts."""
    if samples_out and not image_dir:
        raise click.UsageError("--samples-out needs --images")
    pages = _restrict(load_pages(pages_path), split_path, side)
    cmap = load_codepoint_map(map_path)
    threshold = run.config.lines.overlap_threshold
    all_lines = parallel_map(_lines_task, [(p, threshold) for p in pages], run.jobs)
    transcripts = {p.image_id: transcript_of(p, ls, cmap).flat for p, ls in zip(pages, all_lines)}
    save_lines(out_lines, [(p.image_id, ls) for p, ls in zip(pages, all_lines)], run.meta)
    save_transcripts(out_transcripts, transcripts, run.meta)
    if samples_out:
        entries = [
            ManifestEntry(sample_id=p.image_id, kind=SampleKind.FULL_PAGE,
                          image_path=str(find_image(image_dir, p.image_id)), transcript=transcripts[p.image_id])
            for p in pages
        ]
        save_samples(samples_out, entries, run.meta)
    click.echo(f"pages {len(pages)} lines {sum(len(ls) for ls in all_lines)}")


def _load_inputs(pages_path: str, map_path: str, split_path: Optional[str]) -> Tuple[List[PageAnnotation], CodepointMap]:
    return _restrict(load_pages(pages_path), split_path, "train"), load_codepoint_map(map_path)


@main.command()
@click.option("--pages", "pages_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--map", "map_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--images", "image_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--split", "split_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Only training-side pages")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.pass_obj
def crops(run: RunContext, pages_path: str, map_path: str, image_dir: str, split_path: Optional[str], out_dir: str):
    """Cut multi-line crops and write crops.samples."""
    pages, cmap = _load_inputs(pages_path, map_path, split_path)
    cur = run.config.curriculum
    threshold = run.config.lines.overlap_threshold
    entries: List[ManifestEntry] = []
    out = Path(out_dir)
    for page in pages:
        image = read_image(find_image(image_dir, page.image_id))
        page_crops = make_multiline_crops(
            image, page, assemble_lines(page, threshold), cur.group_min, cur.group_max,
            derive_seed(run.config.seed, "crops", page.image_id), cmap, cur.crop_margin,
        )
        entries += save_crops(out / "images", page.image_id, page_crops)
    save_samples(out / "crops.samples", entries, run.meta)
    click.echo(f"crops {len(entries)}")


@main.command()
@click.option("--pages", "pages_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--map", "map_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--images", "image_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--split", "split_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Only training-side pages")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.pass_obj
def augment(run: RunContext, pages_path: str, map_path: str, image_dir: str, split_path: Optional[str], out_dir: str):
    """Generate one erased and distorted page per input page."""
    pages, cmap = _load_inputs(pages_path, map_path, split_path)
    inputs = [(read_image(find_image(image_dir, p.image_id)), p) for p in pages]
    records = generate_erasure_set(inputs, run.config.augmentation, cmap,
                                   run.config.lines.overlap_threshold, run.jobs)
    out = Path(out_dir)
    paths = save_generated(out, records, run.meta)
    entries = [
        ManifestEntry(sample_id=r.annotation.image_id, kind=SampleKind.GENERATED,
                      image_path=str(paths[r.annotation.image_id]), transcript=r.transcript.flat)
        for r in records
    ]
    save_samples(out / "generated.samples", entries, run.meta)
    click.echo(f"generated {len(records)}")


@main.command()
@click.option("--stage", "stage_no", type=click.IntRange(1, 3), required=True)
@click.option("--crops", "crops_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--full", "full_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--generated", "generated_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@click.pass_obj
def stage(run: RunContext, stage_no: int, crops_path: str, full_path: Optional[str],
          generated_path: Optional[str], out_path: str):
    """Build the manifest of one curriculum stage."""
    if stage_no >= 2 and not full_path:
        raise click.UsageError(f"stage {stage_no} needs --full")
    if stage_no == 3 and not generated_path:
        raise click.UsageError("stage 3 needs --generated")
    manifest = build_stage_manifest(
        stage_no,
        load_samples(crops_path),
        load_samples(full_path) if full_path else (),
        load_samples(generated_path) if generated_path else (),
    )
    save_manifest(out_path, manifest, run.meta)
    click.echo(f"stage {stage_no} entries {len(manifest)}")


@main.command()
@click.option("--pages", "n_pages", type=click.IntRange(min=1), default=240)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.pass_obj
def synth(run: RunContext, n_pages: int, out_dir: str):
    """Generate a synthetic corpus in competition layout."""
    corpus = gen_corpus(run.config.synth, n_pages, run.jobs)
    write_corpus(corpus, out_dir, run.meta)
    click.echo(f"pages {len(corpus.pages)} train {len(corpus.split.train)} valid {len(corpus.split.valid)}")


@main.command("train")
@click.option("--manifest", "manifest_paths", type=click.Path(exists=True, dir_okay=False), multiple=True,
              required=True, help="Stage manifests in schedule order")
@click.option("--valid", "valid_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Validation samples file")
@click.option("--init", "init_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Warm-start checkpoint")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True, help="Checkpoint to write")
@click.option("--log", "log_path", type=click.Path(dir_okay=False), default=None, help="Training log to write")
@click.pass_obj
def train_command(run: RunContext, manifest_paths: Tuple[str, ...], valid_path: str, init_path: Optional[str],
                  out_path: str, log_path: Optional[str]):
    """Train the recognizer, stage by stage."""
    hp = run.config.recognizer
    cur = run.config.curriculum
    manifests = [load_manifest(p) for p in manifest_paths]
    init = load_params(init_path, expected=hp) if init_path else None
    result = train(manifests if len(manifests) > 1 else manifests[0], load_samples(valid_path), hp,
                   init=init,
                   stop=StopRule(patience=cur.patience, metric=cur.stop_metric, smoothing=cur.loss_smoothing),
                   max_epochs=cur.max_epochs,
                   progress=run.progress)
    save_params(out_path, result.params, run.meta)
    if log_path:
        save_train_log(log_path, result.log, run.meta)
    for stage_result in result.stages:
        click.echo(f"stage {stage_result.stage} best epoch {stage_result.best_epoch} "
                   f"CRR {stage_result.best_crr:.2f}" + (" diverged" if stage_result.diverged else ""))


@main.command("eval-crr")
@click.option("--ref", "ref_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--hyp", "hyp_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--report", "report_path", type=click.Path(dir_okay=False), default=None)
@click.option("--verbose", is_flag=True, help="Print per-sample rows")
@click.pass_obj
def eval_crr(run: RunContext, ref_path: str, hyp_path: str, report_path: Optional[str], verbose: bool):
    """Character Recognition Rate of hypothesis transcripts."""
    settings = run.config.metrics
    report = evaluate_transcripts(load_transcripts(ref_path), load_transcripts(hyp_path),
                                  settings.crr_literal, settings.include_separator)
    if report_path:
        save_report(report_path, report, run.meta)
    click.echo(format_report_table(report) if verbose else f"CRR {report.crr:.2f}")


@main.command("eval-f1")
@click.option("--pages", "pages_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Ground-truth pages file")
@click.option("--pred", "pred_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="image_id,labels prediction file")
@click.option("--report", "report_path", type=click.Path(dir_okay=False), default=None)
@click.pass_obj
def eval_f1(run: RunContext, pages_path: str, pred_path: str, report_path: Optional[str]):
    """Point-in-box precision, recall and F1 with error types."""
    truth = {p.image_id: p.boxes for p in load_pages(pages_path)}
    report = evaluate_detections(read_submission(pred_path), truth)
    if report_path:
        save_report(report_path, report, run.meta)
    click.echo(f"P {report.precision:.4f} R {report.recall:.4f} F1 {report.f1:.4f}")
    for key in sorted(report.error_types):
        click.echo(f"{key} {report.error_types[key]}")


def _recognizer(run: RunContext, ckpt: str) -> Recognizer:
    return Recognizer(load_params(ckpt), max_side=run.config.recognizer.max_side)


def _codepoints(map_path: Optional[str]) -> Dict[str, int]:
    return load_codepoint_map(map_path).inverse() if map_path else {}


@main.command()
@click.option("--ckpt", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--image", "image_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--map", "map_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Translate symbols back to codepoints (default: the symbol's own)")
@click.pass_obj
def locate(run: RunContext, ckpt: str, image_path: str, map_path: Optional[str]):
    """Decode one image and print each character at its attention peak."""
    model = _recognizer(run, ckpt)
    result, points = read_characters(model, read_image(image_path), _codepoints(map_path),
                                     run.config.recognizer.max_decode_len)
    if result.truncated:
        logger.warning("%s: decoding stopped at max length", image_path)
    for point in points:
        click.echo(f"{point.label} {point.x:.1f} {point.y:.1f}")


@main.command()
@click.option("--ckpt", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--images", "image_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@click.option("--map", "map_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--transcripts-out", type=click.Path(dir_okay=False), default=None)
@click.pass_obj
def submit(run: RunContext, ckpt: str, image_dir: str, out_path: str, map_path: Optional[str],
           transcripts_out: Optional[str]):
    """Write the competition prediction file for every image in a directory."""
    model = _recognizer(run, ckpt)
    codepoints = _codepoints(map_path)
    files = sorted(p for p in Path(image_dir).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    predictions, transcripts = {}, {}
    for path in files:
        result, points = read_characters(model, read_image(path), codepoints, run.config.recognizer.max_decode_len)
        predictions[path.stem] = points
        transcripts[path.stem] = result.text
    write_submission(out_path, predictions)
    if transcripts_out:
        save_transcripts(transcripts_out, transcripts, run.meta)
    click.echo(f"images {len(files)} characters {sum(len(p) for p in predictions.values())}")


@main.command()
@click.option("--step", type=float, default=1e-5, help="Finite-difference step")
@click.pass_obj
def gradcheck(run: RunContext, step: float):
    """Compare analytic gradients of a toy model with central differences."""
    params, image, transcript = toy_problem(run.config.seed)
    error = grad_check(params, image, transcript, step)
    verdict = "PASS" if error <= GRAD_CHECK_TOLERANCE else "FAIL"
    click.echo(f"max relative error {error:.3e} {verdict}")
    if verdict == "FAIL":
        sys.exit(2)


@main.command()
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--train-pages", type=click.IntRange(min=10), default=None,
              help="Generated training pages (default: experiment.train_pages)")
@click.option("--held-out", type=click.IntRange(min=1), default=None,
              help="Generated pages kept for scoring (default: experiment.held_out)")
@click.pass_obj
def experiment(run: RunContext, out_dir: str, train_pages: Optional[int], held_out: Optional[int]):
    """Compare curriculum training with full-page-only training on a synthetic corpus."""
    report = run_desk_experiment(run.config, out_dir, train_pages, held_out, run.progress)
    click.echo(report.summary())


if __name__ == "__main__":
    main()
