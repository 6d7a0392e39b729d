"""fmbench command-line interface.

Every command is deterministic given its inputs and seeds; FMBENCH_SEED
overrides the default seed (0) where no --seed is given.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from .bench import (FewShotConfig, TaskSpec, crossmodal_eval, extract_features,
                    fewshot_sweep, register_pair, report_emit, run_task)
from .encoders import make_encoder
from .errors import HarnessError
from .imaging.io import load_manifest, load_mask, load_volume
from .prompting import (PromptInstance, SubprocessSegmenter, evaluate_prompted,
                        reference_box_fill_segmenter)
from .stats import paired_bootstrap_pvalue, read_run_result


def default_seed() -> int:
    return int(os.environ.get("FMBENCH_SEED", "0"))


@click.group()
def main():
    """Frozen-backbone adaptation and evaluation harness."""


def _fail(exc: HarnessError) -> None:
    raise click.ClickException(f"{type(exc).__name__}: {exc}")


@main.command()
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--encoder", "encoder_spec", required=True,
              help="toy:seed=7,dim=64[,res=512] or plugin:CMD")
@click.option("--out", "out_path", required=True, type=click.Path())
def extract(manifest_path, encoder_spec, out_path):
    """Encode manifest samples into an FMFD1 feature dump."""
    try:
        encoder = make_encoder(encoder_spec)
        n = extract_features(manifest_path, encoder, out_path)
    except HarnessError as exc:
        _fail(exc)
    click.echo(f"wrote {n} feature map(s) to {out_path}")


@main.command()
@click.option("--task", "task_path", required=True, type=click.Path(exists=True))
@click.option("--features", "features_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
def run(task_path, features_path, out_dir):
    """Run one task: n_runs trainings, test evaluation, bootstrap report."""
    try:
        spec = TaskSpec.from_json(task_path)
        report = run_task(spec, features_path, out_dir,
                          base_dir=Path(task_path).parent)
    except HarnessError as exc:
        _fail(exc)
    click.echo(f"{spec.task_id}: {report.metric} = {report.point:.4f} "
               f"[{report.ci_low:.4f}, {report.ci_high:.4f}]")


@main.command()
@click.option("--task", "task_path", required=True, type=click.Path(exists=True))
@click.option("--features", "features_path", required=True, type=click.Path(exists=True))
@click.option("--k", "k_values", default="1,2,5,10,20,40", show_default=True)
@click.option("--runs", default=5, show_default=True)
@click.option("--seed", default=None, type=int)
@click.option("--out", "out_dir", default=None, type=click.Path())
def fewshot(task_path, features_path, k_values, runs, seed, out_dir):
    """Few-shot sweep: k labeled items per class, mean +- std over runs."""
    try:
        spec = TaskSpec.from_json(task_path)
        fs = FewShotConfig(k_values=tuple(int(k) for k in k_values.split(",")),
                           n_runs=runs,
                           seed=default_seed() if seed is None else seed)
        out = out_dir or f"fewshot_{spec.task_id}"
        payload = fewshot_sweep(spec, features_path, fs, out,
                                base_dir=Path(task_path).parent)
    except HarnessError as exc:
        _fail(exc)
    for k in fs.k_values:
        r = payload["results"][str(k)]
        click.echo(f"k={k}: {r['mean']:.4f} +- {r['std']:.4f}")


@main.command()
@click.option("--task-a", "task_a", required=True, type=click.Path(exists=True))
@click.option("--manifest-b", "manifest_b", required=True, type=click.Path(exists=True))
@click.option("--shared", "shared_path", required=True, type=click.Path(exists=True),
              help="text file, one shared class per line")
@click.option("--features-a", required=True, type=click.Path(exists=True))
@click.option("--features-b", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", default="crossmodal", type=click.Path())
def crossmodal(task_a, manifest_b, shared_path, features_a, features_b, out_dir):
    """Train on modality A, evaluate in-distribution and on modality B."""
    try:
        spec = TaskSpec.from_json(task_a)
        shared = [line.strip() for line in
                  Path(shared_path).read_text("utf-8").splitlines() if line.strip()]
        payload = crossmodal_eval(spec, manifest_b, shared, features_a,
                                  features_b, out_dir,
                                  base_dir=Path(task_a).parent)
    except HarnessError as exc:
        _fail(exc)
    click.echo(f"in-distribution:     {payload['in_distribution']['point']:.4f}")
    click.echo(f"out-of-distribution: {payload['out_of_distribution']['point']:.4f}")
    click.echo(f"gap:                 {payload['gap']:.4f}")


@main.command()
@click.option("--fixed", "fixed_path", required=True, type=click.Path(exists=True))
@click.option("--moving", "moving_path", required=True, type=click.Path(exists=True))
@click.option("--labels", "labels_spec", default=None,
              help="FIXED_LABELS,MOVING_LABELS volume paths")
@click.option("--encoder", "encoder_spec", default=None,
              help="defaults to toy:seed=<seed>,dim=32,res=64")
@click.option("--reg-lambda", default=1.0, show_default=True)
@click.option("--iters", default=500, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def register(fixed_path, moving_path, labels_spec, encoder_spec, reg_lambda,
             iters, out_path):
    """Zero-shot rigid + deformable registration of one volume pair."""
    try:
        encoder = make_encoder(encoder_spec
                               or f"toy:seed={default_seed()},dim=32,res=64")
        fixed_labels = moving_labels = None
        if labels_spec:
            parts = labels_spec.split(",")
            if len(parts) != 2:
                raise click.ClickException(
                    "--labels expects FIXED_LABELS,MOVING_LABELS")
            fixed_labels, moving_labels = parts
        result = register_pair(fixed_path, moving_path, encoder,
                               fixed_labels=fixed_labels,
                               moving_labels=moving_labels,
                               reg_lambda=reg_lambda, iters=iters)
    except HarnessError as exc:
        _fail(exc)
    Path(out_path).write_text(json.dumps(result, indent=2, sort_keys=True), "utf-8")
    mean_dsc = result.get("mean_dsc")
    dsc_txt = "n/a" if mean_dsc is None else f"{mean_dsc:.4f}"
    click.echo(f"rigid=({result['dz']},{result['dy']},{result['dx']}) "
               f"mean_dsc={dsc_txt} stdlogj={result['stdlogj']:.4f}")


@main.command()
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--segmenter", "segmenter_spec", default="reference", show_default=True,
              help="'reference' or a subprocess command line")
@click.option("--prompt", "prompt_kind", type=click.Choice(["box", "point"]),
              required=True)
@click.option("--seed", default=None, type=int)
@click.option("--out", "out_path", default="promptseg.json", type=click.Path())
def promptseg(manifest_path, segmenter_spec, prompt_kind, seed, out_path):
    """Prompted-segmentation evaluation over (slice, label) instances."""
    try:
        rows = load_manifest(manifest_path)
        base = Path(manifest_path).parent
        instances = []
        for row in rows:
            if row.mask_path is None:
                continue
            vol = load_volume(base / row.volume_path)
            mask = load_mask(base / row.mask_path)
            z = row.z_index or 0
            image = vol.data[z]
            plane = mask.data[z] if mask.data.ndim == 3 else mask.data
            binary = (plane > 0).astype(np.int64)
            if not binary.any():
                continue
            instances.append(PromptInstance(sample_id=row.sample_id, image=image,
                                            mask=binary, label=row.label))
        segmenter = (reference_box_fill_segmenter if segmenter_spec == "reference"
                     else SubprocessSegmenter(segmenter_spec.split()))
        result = evaluate_prompted(instances, segmenter, prompt_kind,
                                   seed=default_seed() if seed is None else seed)
    except HarnessError as exc:
        _fail(exc)
    Path(out_path).write_text(json.dumps(result, indent=2, sort_keys=True), "utf-8")
    click.echo(f"overall mean DSC: {result['overall']:.4f} "
               f"({result['n_instances']} instances)")


@main.command()
@click.option("--a", "dir_a", required=True, type=click.Path(exists=True))
@click.option("--b", "dir_b", required=True, type=click.Path(exists=True))
@click.option("--bootstrap", "n_bootstrap", default=1000, show_default=True)
@click.option("--metric", default=None, help="defaults to dir A's report metric")
@click.option("--seed", default=None, type=int)
def compare(dir_a, dir_b, n_bootstrap, metric, seed):
    """Paired bootstrap significance test between two results directories."""
    try:
        runs_a = [read_run_result(p) for p in sorted(Path(dir_a).glob("runresult_run*.csv"))]
        runs_b = [read_run_result(p) for p in sorted(Path(dir_b).glob("runresult_run*.csv"))]
        if not runs_a or not runs_b:
            raise click.ClickException("both directories need runresult_run*.csv files")
        if metric is None:
            report = json.loads((Path(dir_a) / "metric_report.json").read_text("utf-8"))
            metric = report["metric"]
        p = paired_bootstrap_pvalue(runs_a, runs_b, metric, B=n_bootstrap,
                                    seed=default_seed() if seed is None else seed)
    except HarnessError as exc:
        _fail(exc)
    click.echo(f"paired bootstrap p-value ({metric}, B={n_bootstrap}): {p:.6g}")


@main.command()
@click.option("--in", "results_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
def report(results_dir, out_dir):
    """Aggregate result artifacts into report.json plus SVG plots."""
    try:
        payload = report_emit(results_dir, out_dir)
    except HarnessError as exc:
        _fail(exc)
    totals = payload["totals"]
    click.echo(f"report written to {out_dir} "
               f"({totals['tasks']} task(s), {totals['fewshot']} sweep(s))")


if __name__ == "__main__":
    sys.exit(main())
