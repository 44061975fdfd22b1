"""Command-line entry points: simulate, codebook build, track, eval, report."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from .codebook import build_codebook, load_codebook, save_codebook
from .errors import SceneGenerationError
from .geometry import build_rotation_grid
from .scene import SceneConfig, generate_sequence, load_sequence, save_sequence
from .shape import ShapeLatent, canonical_latent, get_basis
from .tracking import (
    RunConfig,
    emit_report,
    load_report,
    rescore,
    run_tracking,
    summarize,
)

EXIT_LOST = 2


def _fail(msg: str):
    click.echo(f"error: {msg}", err=True)
    sys.exit(1)


@click.group()
def main():
    """Category-level 6D pose and shape tracking on depth sequences."""


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
def simulate(config_path, out_dir):
    """Generate a synthetic depth sequence from a scene config."""
    try:
        cfg = SceneConfig.from_dict(json.loads(Path(config_path).read_text()))
        seq = generate_sequence(cfg)
        save_sequence(seq, out_dir)
    except (SceneGenerationError, ValueError, KeyError, OSError) as exc:
        _fail(str(exc))
    click.echo(f"wrote {len(seq)} frames to {out_dir}")


@main.group()
def codebook():
    """Viewpoint-codebook maintenance."""


@codebook.command("build")
@click.option("--category", required=True)
@click.option("--grid-step", type=float, default=10.0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--latent", "latent_json", default=None,
              help="JSON list of raw latent values; defaults to the canonical latent.")
def codebook_build(category, grid_step, out_path, latent_json):
    """Render and encode the rotation-grid codebook for one category."""
    try:
        basis = get_basis(category)
        if latent_json is None:
            latent = canonical_latent(basis)
        else:
            latent = ShapeLatent(np.asarray(json.loads(latent_json), dtype=float))
        grid = build_rotation_grid(grid_step)
        cb = build_codebook(basis, latent, grid)
        save_codebook(out_path, cb)
    except (ValueError, KeyError, OSError) as exc:
        _fail(str(exc))
    click.echo(f"wrote {cb.size} bins to {out_path}")


@main.command()
@click.option("--seq", "seq_dir", required=True, type=click.Path(exists=True))
@click.option("--codebook", "cb_path", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
def track(seq_dir, cb_path, config_path, out_dir):
    """Track a saved sequence and write CSV/JSON reports."""
    try:
        seq = load_sequence(seq_dir)
        cb = load_codebook(cb_path)
        run = RunConfig.from_dict(json.loads(Path(config_path).read_text()))
        report = run_tracking(seq, cb, run)
        emit_report(report, out_dir)
    except (ValueError, KeyError, OSError) as exc:
        _fail(str(exc))
    s = report.summary
    click.echo(
        f"5deg5cm {s['pct_5deg5cm']:.1f}%  iou25 {s['pct_iou25']:.1f}%  "
        f"terr {s['mean_terr_cm']:.2f} cm  rerr {s['mean_rerr_deg']:.2f} deg"
    )
    if s["lost_frames"] > 0:
        click.echo(f"track lost on {s['lost_frames']} frames", err=True)
        sys.exit(EXIT_LOST)


@main.command("eval")
@click.option("--report", "report_dir", required=True, type=click.Path(exists=True))
@click.option("--gt", "gt_dir", required=True, type=click.Path(exists=True))
def eval_cmd(report_dir, gt_dir):
    """Rescore a stored report against ground truth and verify its summary."""
    try:
        doc = load_report(report_dir)
        seq = load_sequence(gt_dir)
        frames = rescore(doc["frames"], seq)
        summary = summarize(frames, doc["symmetry_aware"])
    except (ValueError, KeyError, OSError) as exc:
        _fail(str(exc))
    click.echo(json.dumps(summary, indent=1, sort_keys=True))
    if summary != doc["summary"]:
        _fail("recomputed summary does not match the stored report")


@main.command("report")
@click.option("--in", "report_dir", required=True, type=click.Path(exists=True))
@click.option("--plot", "plot_path", default=None, type=click.Path())
def report_cmd(report_dir, plot_path):
    """Print a stored report summary and optionally plot per-frame errors."""
    try:
        doc = load_report(report_dir)
    except (ValueError, KeyError, OSError) as exc:
        _fail(str(exc))
    click.echo(json.dumps(doc["summary"], indent=1, sort_keys=True))
    if plot_path is not None:
        from .tracking import _plot_svg, FrameResult, TrackReport

        report = TrackReport(category=doc["category"],
                             run=RunConfig.from_dict(doc["run"]),
                             symmetry_aware=doc["symmetry_aware"])
        for rec in doc["frames"]:
            report.frames.append(
                FrameResult(
                    frame=rec["frame"], pose=None, size=rec["size"],
                    latent_raw=np.asarray(rec["latent_raw"]),
                    terr_cm=rec["terr_cm"], rerr_deg=rec["rerr_deg"],
                    iou=rec["iou"], cd=rec["cd"], hit_5deg5cm=rec["hit_5deg5cm"],
                    lost=rec["lost"], ms=rec["ms"],
                )
            )
        Path(plot_path).write_text(_plot_svg(report))
        click.echo(f"wrote {plot_path}")


if __name__ == "__main__":
    main()
