"""End-to-end task execution: extraction, training runs, protocol sweeps."""

from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..encoders import Encoder, FeatureDump, encode_slice, write_feature_dump
from ..errors import RestrictionError, ShapeError, SupportError
from ..heads.config import TrainConfig
from ..heads.train import predict, train_head
from ..imaging.io import ManifestRow, load_manifest, load_volume
from ..imaging.preprocess import preprocess_slice
from ..registration import (FeatureVolume, deformable_register, dice,
                            rigid_align, std_log_jacobian, upsample_field, warp,
                            DisplacementField)
from ..rng import derive_key, generator
from ..stats import (MetricReport, RunResult, bootstrap_ci, metric_on_rows,
                     write_run_result)
from ..survival import (SurvivalRecord, concordance_index, kaplan_meier,
                        load_survival_manifest, select_risk_threshold,
                        train_cox_head)
from .tasks import (FewShotConfig, SplitGuard, TaskData, TaskSpec,
                    build_task_data, load_task_rows)


# -- feature extraction -----------------------------------------------------------------

def extract_features(manifest_path: str | Path, encoder: Encoder,
                     out_path: str | Path) -> int:
    """Encode every manifest sample (slice or whole volume) into an FMFD1 dump."""
    manifest_path = Path(manifest_path)
    rows = load_manifest(manifest_path)
    base = manifest_path.parent
    res = encoder.descriptor.input_resolution
    maps = []
    volume_cache: dict[str, object] = {}
    for row in rows:
        vol_path = str(base / row.volume_path)
        if vol_path not in volume_cache:
            volume_cache[vol_path] = load_volume(vol_path)
        vol = volume_cache[vol_path]
        if row.z_index is not None:
            slices = [(None, vol.slice_at(row.z_index))]
        else:
            slices = [(k, vol.slice_at(k)) for k in range(vol.shape[0])]
        for k, slc in slices:
            fm = encode_slice(preprocess_slice(slc, res), encoder)
            fm.sample_id = row.sample_id if k is None else f"{row.sample_id}#{k}"
            maps.append(fm)
    write_feature_dump(maps, out_path)
    return len(maps)


# -- supervised runs -----------------------------------------------------------------------

def _train_one_run(spec: TaskSpec, data: TaskData, seed: int,
                   train_inputs=None, train_targets=None):
    tc = replace(spec.train, seed=seed)
    objective = "mse" if spec.kind == "regression" else "cross_entropy"
    inputs = data.train.inputs if train_inputs is None else train_inputs
    targets = data.train.targets if train_targets is None else train_targets
    head = train_head(inputs, targets, data.val.inputs, data.val.targets,
                      spec.head, tc, objective=objective)
    scores = predict(head, data.test_inputs)
    return head, scores


def _report_extras(spec: TaskSpec) -> dict:
    return {
        "task_id": spec.task_id,
        "kind": spec.kind,
        "head": spec.head.to_dict() if spec.head else None,
        "lr_grid": list(spec.train.lr_grid),
        "epochs": spec.train.epochs,
        "batch_size": spec.train.batch_size,
        "momentum": spec.train.momentum,
        "n_runs": spec.n_runs,
    }


def run_task(spec: TaskSpec, features_path: str | Path, out_dir: str | Path,
             base_dir: str | Path = ".") -> MetricReport:
    """Train ``n_runs`` heads (seeds 0..n-1), evaluate on test, write artifacts.

    Test labels stay behind a SplitGuard until every run's predictions are in.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if spec.kind == "survival":
        return run_survival_task(spec, features_path, out_dir, base_dir)
    rows, manifest_dir = load_task_rows(spec, Path(base_dir))
    dump = FeatureDump(features_path)
    data = build_task_data(spec, rows, dump, manifest_dir)

    per_run_scores = []
    best_lrs = []
    for run in range(spec.n_runs):
        head, scores = _train_one_run(spec, data, seed=run)
        per_run_scores.append(scores)
        best_lrs.append(head.best_lr)

    truths = data.test_guard.unlock_for_evaluation()
    runs = []
    for run, scores in enumerate(per_run_scores):
        rr = RunResult(run_id=run, sample_ids=data.test_ids, truths=truths,
                       scores=scores)
        write_run_result(rr, out_dir / f"runresult_run{run}.csv")
        runs.append(rr)

    report = bootstrap_ci(runs, spec.metric, B=1000, seed=spec.train.seed)
    report.extra = _report_extras(spec) | {"best_lrs": best_lrs}
    report.save(out_dir / "metric_report.json")
    _maybe_plot_roc(spec, runs, out_dir)
    return report


def _maybe_plot_roc(spec: TaskSpec, runs: list[RunResult], out_dir: Path) -> None:
    if spec.metric != "auroc":
        return
    from .report import roc_svg
    from ..stats import pooled_roc
    points, auc = pooled_roc(runs)
    (out_dir / "roc.svg").write_bytes(roc_svg(points, auc, spec.task_id))


# -- survival ---------------------------------------------------------------------------

def run_survival_task(spec: TaskSpec, features_path: str | Path, out_dir: Path,
                      base_dir: str | Path = ".") -> MetricReport:
    """Cox head runs: c-index bootstrap plus threshold-split KM curves."""
    manifest_path = Path(spec.manifest)
    if not manifest_path.is_absolute():
        manifest_path = Path(base_dir) / manifest_path
    rows = load_survival_manifest(manifest_path)
    dump = FeatureDump(features_path)

    def features_of(split):
        sel = [r for r in rows if r.split == split]
        missing = [r.feature_ref for r in sel if r.feature_ref not in dump]
        if missing:
            from ..errors import CoverageError
            raise CoverageError(f"survival features missing: {missing[:10]}",
                                missing_ids=missing)
        X = np.stack([dump.get(r.feature_ref).class_token.astype(np.float64)
                      for r in sel])
        recs = [SurvivalRecord(subject_id=r.subject_id, time=r.time_days,
                               event=r.event) for r in sel]
        return sel, X, recs

    train_rows, X_train, rec_train = features_of("train")
    val_rows, X_val, rec_val = features_of("val")
    test_rows, X_test, rec_test = features_of("test")

    runs = []
    km_payload = None
    for run in range(spec.n_runs):
        tc = replace(spec.train, seed=run)
        head = train_cox_head(X_train, rec_train, X_val, rec_val, tc)
        risks = predict(head, X_test)[:, 0]
        rr = RunResult(run_id=run, sample_ids=[r.subject_id for r in test_rows],
                       truths=np.array([f"{r.time_days}|{r.event}" for r in test_rows]),
                       scores=risks)
        write_run_result(rr, out_dir / f"runresult_run{run}.csv")
        runs.append(rr)
        if run == 0:
            val_risks = predict(head, X_val)[:, 0]
            scored_val = [replace(r, risk=float(s)) for r, s in zip(rec_val, val_risks)]
            threshold = select_risk_threshold(scored_val)
            scored_test = [replace(r, risk=float(s)) for r, s in zip(rec_test, risks)]
            high = [r for r in scored_test if r.risk > threshold]
            low = [r for r in scored_test if r.risk <= threshold]
            from ..survival import logrank_statistic
            km_payload = {
                "threshold": threshold,
                "logrank_statistic": logrank_statistic(high, low) if high and low else None,
                "groups": {
                    "high_risk": _km_points(high),
                    "low_risk": _km_points(low),
                },
            }
            (out_dir / "km.json").write_text(
                json.dumps(km_payload, indent=2, sort_keys=True), "utf-8")

    def c_index_metric(truths, scores):
        recs = []
        for t, s in zip(truths, scores):
            time_s, event_s = str(t).split("|")
            recs.append(SurvivalRecord(subject_id="x", time=float(time_s),
                                       event=int(event_s), risk=float(s)))
        return concordance_index(recs)

    report = bootstrap_ci(runs, c_index_metric, B=1000, seed=spec.train.seed)
    report.metric = "c_index"
    report.extra = _report_extras(spec) | ({"km": km_payload} if km_payload else {})
    report.save(out_dir / "metric_report.json")
    return report


def _km_points(records) -> dict:
    if not records:
        return {"times": [], "survival": [], "at_risk": []}
    km = kaplan_meier(records)
    return {"times": km.times.tolist(), "survival": km.survival.tolist(),
            "at_risk": km.at_risk.tolist()}


# -- few-shot sweep ---------------------------------------------------------------------

def fewshot_sweep(spec: TaskSpec, features_path: str | Path, fs: FewShotConfig,
                  out_dir: str | Path, base_dir: str | Path = ".") -> dict:
    """Per-k mean +- std of the task metric over runs with k items per class.

    Sampling is per (k, run), without replacement, seeded; the full validation
    split is reused for selection (features are frozen; only the head sees the
    few-shot training subset).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows, manifest_dir = load_task_rows(spec, Path(base_dir))
    dump = FeatureDump(features_path)
    data = build_task_data(spec, rows, dump, manifest_dir)

    targets = np.asarray(data.train.targets)
    by_class: dict[int, np.ndarray] = {
        c: np.flatnonzero(targets == c) for c in np.unique(targets)}
    max_k = max(fs.k_values)
    for c, idx in by_class.items():
        if idx.size < max_k:
            raise SupportError(
                f"class {data.class_names[c]!r} has {idx.size} training items, "
                f"needs {max_k}")

    is_array = isinstance(data.train.inputs, np.ndarray)
    results = {}
    for k in fs.k_values:
        per_run = []
        for run in range(fs.n_runs):
            rng = generator(derive_key(fs.seed, "fewshot", k, run))
            chosen = np.sort(np.concatenate(
                [rng.choice(idx, size=k, replace=False) for c, idx in
                 sorted(by_class.items())]))
            inputs = (data.train.inputs[chosen] if is_array
                      else [data.train.inputs[i] for i in chosen])
            head, scores = _train_one_run(spec, data, seed=run,
                                          train_inputs=inputs,
                                          train_targets=targets[chosen])
            per_run.append((run, scores, sorted(data.train.ids[i] for i in chosen)))
        truths = data.test_guard.unlock_for_evaluation()
        metrics = [metric_on_rows(spec.metric, truths, scores)
                   for _, scores, _ in per_run]
        results[k] = {
            "mean": float(np.mean(metrics)),
            "std": float(np.std(metrics)),  # dispersion over runs, reported as std
            "per_run": [float(m) for m in metrics],
            "sampled_ids": {str(run): ids for run, _, ids in per_run},
        }
    payload = {"task_id": spec.task_id, "metric": spec.metric,
               "k_values": list(fs.k_values), "n_runs": fs.n_runs,
               "seed": fs.seed, "results": {str(k): v for k, v in results.items()}}
    (out_dir / "fewshot.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True), "utf-8")
    return payload


# -- cross-modality -----------------------------------------------------------------------

def crossmodal_eval(spec_a: TaskSpec, manifest_b: str | Path, shared_classes: list[str],
                    features_a: str | Path, features_b: str | Path,
                    out_dir: str | Path, base_dir: str | Path = ".") -> dict:
    """Train on modality A, evaluate the same frozen heads on A-test and B-test."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    shared = list(shared_classes)
    shared_set = set(shared)

    rows_a, dir_a = load_task_rows(spec_a, Path(base_dir))
    bad_a = sorted({r.label for r in rows_a} - shared_set)
    if bad_a:
        raise RestrictionError(
            f"modality-A manifest holds labels outside the shared set: {bad_a[:5]}")
    manifest_b = Path(manifest_b)
    rows_b_all = load_manifest(manifest_b)
    rows_b = [r for r in rows_b_all if r.split == "test"] or rows_b_all
    bad_b = sorted({r.label for r in rows_b} - shared_set)
    if bad_b:
        raise RestrictionError(
            f"modality-B manifest holds labels outside the shared set: {bad_b[:5]}")

    spec = replace(spec_a, classes=shared)
    dump_a = FeatureDump(features_a)
    data_a = build_task_data(spec, rows_a, dump_a, dir_a)

    rows_b_as_test = [replace(r, split="test") for r in rows_b]
    data_b = build_task_data(spec, rows_b_as_test, FeatureDump(features_b),
                             manifest_b.parent)

    runs_a, runs_b = [], []
    for run in range(spec.n_runs):
        head, scores_a = _train_one_run(spec, data_a, seed=run)
        scores_b = predict(head, data_b.test_inputs)
        runs_a.append((scores_a, run))
        runs_b.append((scores_b, run))

    truths_a = data_a.test_guard.unlock_for_evaluation()
    truths_b = data_b.test_guard.unlock_for_evaluation()
    rr_a = [RunResult(run_id=r, sample_ids=data_a.test_ids, truths=truths_a,
                      scores=s) for s, r in runs_a]
    rr_b = [RunResult(run_id=r, sample_ids=data_b.test_ids, truths=truths_b,
                      scores=s) for s, r in runs_b]
    for rr, tag in ((rr_a, "a"), (rr_b, "b")):
        for r in rr:
            write_run_result(r, out_dir / f"runresult_{tag}_run{r.run_id}.csv")

    rep_a = bootstrap_ci(rr_a, spec.metric, B=1000, seed=spec.train.seed)
    rep_b = bootstrap_ci(rr_b, spec.metric, B=1000, seed=spec.train.seed)
    payload = {
        "task_id": spec.task_id,
        "metric": spec.metric,
        "shared_classes": shared,
        "in_distribution": rep_a.to_dict(),
        "out_of_distribution": rep_b.to_dict(),
        "gap": rep_a.point - rep_b.point,
    }
    (out_dir / "crossmodal.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True), "utf-8")
    return payload


# -- registration pairs --------------------------------------------------------------------

def register_pair(fixed_path: str | Path, moving_path: str | Path, encoder: Encoder,
                  fixed_labels: str | Path | None = None,
                  moving_labels: str | Path | None = None,
                  reg_lambda: float = 1.0, iters: int = 500) -> dict:
    """Two-stage registration of one volume pair plus DSC/stdLogJ evaluation."""
    fixed_vol = load_volume(fixed_path)
    moving_vol = load_volume(moving_path)
    res = encoder.descriptor.input_resolution

    def featurize(vol):
        maps = [encode_slice(preprocess_slice(vol.slice_at(k), res), encoder)
                for k in range(vol.shape[0])]
        return FeatureVolume.from_maps(maps, volume_id=vol.volume_id)

    f_feat = featurize(fixed_vol)
    m_feat = featurize(moving_vol)
    rigid = rigid_align(f_feat, m_feat)
    field = deformable_register(f_feat, m_feat, rigid, reg_lambda=reg_lambda,
                                iters=iters)

    result = {
        "fixed_id": fixed_vol.volume_id,
        "moving_id": moving_vol.volume_id,
        "dz": rigid.dz, "dy": rigid.dy, "dx": rigid.dx,
        "rigid_score": rigid.score,
        "iters_used": field.meta.get("iters_used", iters),
        "final_loss": field.meta.get("final_loss"),
    }

    u_vox = upsample_field(field, fixed_vol.shape)
    std, folded = std_log_jacobian(DisplacementField(u=u_vox))
    result["stdlogj"] = std
    result["folded_fraction"] = folded

    if fixed_labels is not None and moving_labels is not None:
        from ..imaging.io import load_mask
        fl = load_mask(fixed_labels).data
        ml = load_mask(moving_labels).data
        warped = warp(ml, DisplacementField(u=u_vox), interpolation="nearest")
        labels = sorted(set(np.unique(fl)) - {0})
        per_label, before = {}, {}
        for lab in labels:
            per_label[str(int(lab))] = dice(warped == lab, fl == lab)
            before[str(int(lab))] = dice(ml == lab, fl == lab)
        result["dsc_per_label"] = per_label
        result["dsc_before_per_label"] = before
        result["mean_dsc"] = float(np.mean(list(per_label.values()))) if per_label else 1.0
        result["mean_dsc_before"] = float(np.mean(list(before.values()))) if before else 1.0
    else:
        result["dsc_per_label"] = {}
        result["mean_dsc"] = None
    return result
