"""End-to-end orchestration: extraction, task runs, sweeps, reports, CLI."""

import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from fmbench.bench import (FewShotConfig, SplitGuard, TaskSpec,
                           crossmodal_eval, extract_features, fewshot_sweep,
                           make_classification_corpus, make_registration_pair,
                           make_survival_corpus, register_pair, report_emit,
                           run_task)
from fmbench.encoders import ToyEncoder
from fmbench.errors import (CoverageError, LeakageError, RestrictionError,
                            SupportError)
from fmbench.heads.config import HeadConfig, TrainConfig
from fmbench.stats import read_run_result

D = 16
QUICK_TRAIN = TrainConfig(epochs=25, batch_size=64, seed=0)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    manifest = make_classification_corpus(root, n_classes=3, n_train=20,
                                          n_val=6, n_test=6, side=64, seed=0,
                                          with_masks=True)
    features = root / "features.fmfd"
    encoder = ToyEncoder(seed=7, embed_dim=D, input_resolution=64)
    extract_features(manifest, encoder, features)
    return {"root": root, "manifest": manifest, "features": features}


def make_spec(corpus, task_id="toy3", kind="image_cls", metric="balanced_accuracy",
              head=None, n_runs=5):
    head = head or HeadConfig(kind="cls_linear", n_outputs=3)
    return TaskSpec(task_id=task_id, kind=kind,
                    manifest=str(corpus["manifest"]), metric=metric,
                    classes=["c0", "c1", "c2"], head=head, train=QUICK_TRAIN,
                    n_runs=n_runs)


# -- run_task -------------------------------------------------------------------

def test_run_task_separable_corpus(corpus, tmp_path):
    spec = make_spec(corpus)
    report = run_task(spec, corpus["features"], tmp_path / "out")
    assert report.point >= 0.95
    run_files = sorted((tmp_path / "out").glob("runresult_run*.csv"))
    assert len(run_files) == 5
    assert (tmp_path / "out" / "metric_report.json").exists()
    assert report.extra["lr_grid"] == list(QUICK_TRAIN.lr_grid)


def test_run_task_rerun_byte_identical(corpus, tmp_path):
    spec = make_spec(corpus, n_runs=2)
    out1, out2 = tmp_path / "o1", tmp_path / "o2"
    run_task(spec, corpus["features"], out1)
    run_task(spec, corpus["features"], out2)
    for name in ["runresult_run0.csv", "runresult_run1.csv", "metric_report.json"]:
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


def test_run_task_mask_head(corpus, tmp_path):
    spec = make_spec(corpus, kind="mask_cls",
                     head=HeadConfig(kind="mask_pool_linear", n_outputs=3,
                                     pooling="mean"))
    report = run_task(spec, corpus["features"], tmp_path / "out")
    # random per-sample ROIs mix positional codes into the pooled feature, so
    # the ceiling sits below the image-level case; well above chance (1/3)
    assert report.point >= 0.7


def test_run_task_group_leakage_rejected(corpus, tmp_path):
    rows = (corpus["manifest"]).read_text("utf-8").splitlines()
    # force one group to span train and test
    header, body = rows[0], rows[1:]
    body[0] = body[0].replace("g_s00000", "g_shared")
    body[-1] = body[-1].replace(body[-1].split(",")[-1], "g_shared")
    leaky = corpus["root"] / "leaky.csv"
    leaky.write_text("\n".join([header] + body) + "\n", "utf-8")
    spec = replace(make_spec(corpus), manifest=str(leaky))
    with pytest.raises(LeakageError):
        run_task(spec, corpus["features"], tmp_path / "out")


def test_run_task_missing_features_lists_ids(corpus, tmp_path):
    encoder = ToyEncoder(seed=7, embed_dim=D, input_resolution=64)
    partial = tmp_path / "partial.fmfd"
    short_manifest = tmp_path / "short.csv"
    lines = corpus["manifest"].read_text("utf-8").splitlines()
    short_manifest.write_text("\n".join(lines[:5]) + "\n", "utf-8")
    # extraction for 4 samples only, but the task references the full manifest
    import shutil
    shutil.copytree(corpus["root"] / "volumes", tmp_path / "volumes")
    extract_features(short_manifest, encoder, partial)
    spec = make_spec(corpus)
    with pytest.raises(CoverageError) as err:
        run_task(spec, partial, tmp_path / "out")
    assert len(err.value.missing_ids) > 0


# -- split guard ------------------------------------------------------------------

def test_split_guard_blocks_early_access():
    guard = SplitGuard(np.array([1, 2, 3]))
    with pytest.raises(LeakageError):
        _ = guard.labels
    got = guard.unlock_for_evaluation()
    assert np.array_equal(got, [1, 2, 3])
    assert np.array_equal(guard.labels, [1, 2, 3])


# -- few-shot ----------------------------------------------------------------------

def test_fewshot_k1_uses_one_item_per_class(corpus, tmp_path):
    spec = make_spec(corpus, n_runs=2)
    fs = FewShotConfig(k_values=(1,), n_runs=2, seed=0)
    payload = fewshot_sweep(spec, corpus["features"], fs, tmp_path / "fs")
    for run_ids in payload["results"]["1"]["sampled_ids"].values():
        assert len(run_ids) == 3  # one per class


def test_fewshot_seeds_draw_different_subsets(corpus, tmp_path):
    spec = make_spec(corpus, n_runs=2)
    fs = FewShotConfig(k_values=(5,), n_runs=2, seed=0)
    payload = fewshot_sweep(spec, corpus["features"], fs, tmp_path / "fs")
    ids = payload["results"]["5"]["sampled_ids"]
    assert ids["0"] != ids["1"]


def test_fewshot_full_support_reproduces_run_task(corpus, tmp_path):
    spec = make_spec(corpus, n_runs=2, metric="accuracy")
    report = run_task(spec, corpus["features"], tmp_path / "full")
    fs = FewShotConfig(k_values=(20,), n_runs=2, seed=0)  # 20 = full class support
    payload = fewshot_sweep(spec, corpus["features"], fs, tmp_path / "fs")
    run_metrics = []
    for run in range(2):
        rr = read_run_result(tmp_path / "full" / f"runresult_run{run}.csv")
        from fmbench.stats import metric_on_rows
        run_metrics.append(metric_on_rows("accuracy", rr.truths.astype(np.int64),
                                          rr.scores))
    assert payload["results"]["20"]["per_run"] == pytest.approx(run_metrics)


def test_fewshot_insufficient_support(corpus, tmp_path):
    spec = make_spec(corpus)
    fs = FewShotConfig(k_values=(50,), n_runs=1, seed=0)
    with pytest.raises(SupportError, match="c0"):
        fewshot_sweep(spec, corpus["features"], fs, tmp_path / "fs")


# -- cross-modality ------------------------------------------------------------------

@pytest.fixture(scope="module")
def crossmodal_setup(tmp_path_factory):
    root = tmp_path_factory.mktemp("xmodal")
    encoder = ToyEncoder(seed=7, embed_dim=D, input_resolution=64)
    manifest_a = make_classification_corpus(root / "a", n_classes=3, n_train=15,
                                            n_val=5, n_test=8, side=64, seed=0,
                                            template_seed=123)
    features_a = root / "a.fmfd"
    extract_features(manifest_a, encoder, features_a)
    # paired modality B: identical templates, different noise draws
    manifest_b = make_classification_corpus(root / "b", n_classes=3, n_train=1,
                                            n_val=1, n_test=8, side=64, seed=0,
                                            template_seed=123, modality="MR",
                                            noise=0.05)
    features_b = root / "b.fmfd"
    extract_features(manifest_b, encoder, features_b)
    # unrelated modality B: different templates entirely
    manifest_r = make_classification_corpus(root / "r", n_classes=3, n_train=1,
                                            n_val=1, n_test=8, side=64, seed=9,
                                            template_seed=999, modality="MR",
                                            noise=2.0)
    features_r = root / "r.fmfd"
    extract_features(manifest_r, encoder, features_r)
    return {"root": root, "manifest_a": manifest_a, "features_a": features_a,
            "manifest_b": manifest_b, "features_b": features_b,
            "manifest_r": manifest_r, "features_r": features_r}


def xm_spec(setup):
    return TaskSpec(task_id="xm", kind="image_cls", metric="balanced_accuracy",
                    manifest=str(setup["manifest_a"]),
                    classes=["c0", "c1", "c2"],
                    head=HeadConfig(kind="cls_linear", n_outputs=3),
                    train=QUICK_TRAIN, n_runs=2)


def test_crossmodal_same_templates_small_gap(crossmodal_setup, tmp_path):
    payload = crossmodal_eval(xm_spec(crossmodal_setup),
                              crossmodal_setup["manifest_b"],
                              ["c0", "c1", "c2"],
                              crossmodal_setup["features_a"],
                              crossmodal_setup["features_b"],
                              tmp_path / "xm")
    assert payload["in_distribution"]["point"] >= 0.95
    assert abs(payload["gap"]) < 0.05  # same class templates transfer


def test_crossmodal_unrelated_features_drop(crossmodal_setup, tmp_path):
    payload = crossmodal_eval(xm_spec(crossmodal_setup),
                              crossmodal_setup["manifest_r"],
                              ["c0", "c1", "c2"],
                              crossmodal_setup["features_a"],
                              crossmodal_setup["features_r"],
                              tmp_path / "xm")
    assert payload["out_of_distribution"]["point"] < 0.75


def test_crossmodal_unrestricted_manifest_rejected(crossmodal_setup, tmp_path):
    with pytest.raises(RestrictionError):
        crossmodal_eval(xm_spec(crossmodal_setup),
                        crossmodal_setup["manifest_b"],
                        ["c0", "c1"],  # c2 exists in B but is not shared
                        crossmodal_setup["features_a"],
                        crossmodal_setup["features_b"],
                        tmp_path / "xm")


# -- survival task ---------------------------------------------------------------------

def test_survival_task_pipeline(tmp_path):
    manifest, dump = make_survival_corpus(tmp_path, n_subjects=120, seed=0)
    spec = TaskSpec(task_id="surv", kind="survival", manifest=str(manifest),
                    metric="c_index", train=TrainConfig(epochs=25, seed=0),
                    n_runs=2)
    report = run_task(spec, dump, tmp_path / "out")
    assert report.metric == "c_index"
    assert report.point >= 0.8
    km = json.loads((tmp_path / "out" / "km.json").read_text("utf-8"))
    assert set(km["groups"]) == {"high_risk", "low_risk"}
    assert km["logrank_statistic"] > 3.841  # chi-square 0.05 critical value


# -- registration pair -------------------------------------------------------------------

def test_register_pair_end_to_end(tmp_path):
    paths = make_registration_pair(tmp_path, seed=0, shape=(12, 64, 64),
                                   warp_scale=1.5)
    encoder = ToyEncoder(seed=0, embed_dim=16, input_resolution=64)
    result = register_pair(paths["fixed"], paths["moving"], encoder,
                           fixed_labels=paths["fixed_labels"],
                           moving_labels=paths["moving_labels"],
                           reg_lambda=1.0, iters=60)
    for key in ("fixed_id", "moving_id", "dz", "dy", "dx", "dsc_per_label",
                "mean_dsc", "stdlogj", "folded_fraction", "iters_used"):
        assert key in result
    assert result["mean_dsc"] >= result["mean_dsc_before"] - 0.05


# -- report emission -----------------------------------------------------------------------

def test_report_empty_results_dir(tmp_path):
    (tmp_path / "empty_in").mkdir()
    out = tmp_path / "report"
    report_emit(tmp_path / "empty_in", out)
    report = json.loads((out / "report.json").read_text("utf-8"))
    assert report["tasks"] == []
    assert report["totals"]["tasks"] == 0


def test_report_binary_task_emits_roc(corpus, tmp_path):
    # binary task: restrict to two classes via a filtered manifest
    lines = corpus["manifest"].read_text("utf-8").splitlines()
    header = lines[0]
    body = [ln for ln in lines[1:] if ",c2," not in ln]
    binary_manifest = corpus["root"] / "binary.csv"
    binary_manifest.write_text("\n".join([header] + body) + "\n", "utf-8")
    spec = TaskSpec(task_id="toy2", kind="image_cls", metric="auroc",
                    manifest=str(binary_manifest), classes=["c0", "c1"],
                    head=HeadConfig(kind="cls_linear", n_outputs=2),
                    train=QUICK_TRAIN, n_runs=2)
    results = tmp_path / "results" / "toy2"
    run_task(spec, corpus["features"], results)
    out = tmp_path / "rep"
    payload = report_emit(tmp_path / "results", out)
    assert payload["totals"]["tasks"] == 1
    roc = (out / "roc_toy2.svg").read_text("utf-8")
    assert "polyline" in roc
    # rerun: byte-identical SVGs
    out2 = tmp_path / "rep2"
    report_emit(tmp_path / "results", out2)
    assert (out / "roc_toy2.svg").read_bytes() == (out2 / "roc_toy2.svg").read_bytes()
    assert (out / "report.json").read_bytes() == (out2 / "report.json").read_bytes()


def test_report_totals_match_entries(corpus, tmp_path):
    spec = make_spec(corpus, n_runs=2)
    run_task(spec, corpus["features"], tmp_path / "results" / "toy3")
    payload = report_emit(tmp_path / "results", tmp_path / "rep")
    assert payload["totals"]["tasks"] == len(payload["tasks"]) == 1
