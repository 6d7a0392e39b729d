"""Aggregated report JSON and deterministic SVG plots.

SVG output is hand-rolled with fixed-precision coordinates so identical
inputs always produce identical bytes.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import FormatError
from ..stats import read_run_result

_W, _H, _PAD = 360, 280, 40


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _svg_open(title: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W // 2}" y="18" text-anchor="middle" font-size="13" '
        f'font-family="sans-serif">{title}</text>',
    ]


def _axes(x_label: str, y_label: str) -> list[str]:
    x0, y0, x1, y1 = _PAD, _H - _PAD, _W - _PAD, _PAD
    return [
        f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>',
        f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>',
        f'<text x="{(x0 + x1) // 2}" y="{_H - 8}" text-anchor="middle" '
        f'font-size="11" font-family="sans-serif">{x_label}</text>',
        f'<text x="12" y="{(y0 + y1) // 2}" text-anchor="middle" font-size="11" '
        f'font-family="sans-serif" transform="rotate(-90 12 {(y0 + y1) // 2})">'
        f'{y_label}</text>',
    ]


def _to_px(xs, ys, x_range, y_range):
    x_lo, x_hi = x_range
    y_lo, y_hi = y_range
    spanx = max(x_hi - x_lo, 1e-12)
    spany = max(y_hi - y_lo, 1e-12)
    px = [_PAD + (x - x_lo) / spanx * (_W - 2 * _PAD) for x in xs]
    py = [_H - _PAD - (y - y_lo) / spany * (_H - 2 * _PAD) for y in ys]
    return px, py


def _polyline(xs, ys, color: str, width: int = 2) -> str:
    pts = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in zip(xs, ys))
    return (f'<polyline points="{pts}" fill="none" stroke="{color}" '
            f'stroke-width="{width}"/>')


def roc_svg(points: np.ndarray, auc: float, title: str) -> bytes:
    parts = _svg_open(f"{title} (AUROC {auc:.4f})")
    parts += _axes("false positive rate", "true positive rate")
    dx, dy = _to_px([0, 1], [0, 1], (0, 1), (0, 1))
    parts.append(_polyline(dx, dy, "#bbbbbb", width=1))
    px, py = _to_px(points[:, 0], points[:, 1], (0, 1), (0, 1))
    parts.append(_polyline(px, py, "#1f6fb2"))
    parts.append("</svg>")
    return ("\n".join(parts) + "\n").encode()


def fewshot_svg(payload: dict, title: str) -> bytes:
    ks = sorted(int(k) for k in payload["results"])
    means = [payload["results"][str(k)]["mean"] for k in ks]
    stds = [payload["results"][str(k)]["std"] for k in ks]
    parts = _svg_open(title)
    parts += _axes("items per class", payload.get("metric", "metric"))
    x_range = (min(ks), max(ks) if max(ks) > min(ks) else min(ks) + 1)
    px, py = _to_px(ks, means, x_range, (0, 1))
    for x, y, m, s in zip(px, py, means, stds):
        _, lo = _to_px([0], [max(m - s, 0.0)], x_range, (0, 1))
        _, hi = _to_px([0], [min(m + s, 1.0)], x_range, (0, 1))
        parts.append(f'<line x1="{_fmt(x)}" y1="{_fmt(lo[0])}" x2="{_fmt(x)}" '
                     f'y2="{_fmt(hi[0])}" stroke="#888888"/>')
    parts.append(_polyline(px, py, "#b2401f"))
    for x, y in zip(px, py):
        parts.append(f'<circle cx="{_fmt(x)}" cy="{_fmt(y)}" r="3" fill="#b2401f"/>')
    parts.append("</svg>")
    return ("\n".join(parts) + "\n").encode()


def km_svg(payload: dict, title: str) -> bytes:
    parts = _svg_open(title)
    parts += _axes("days", "survival")
    groups = payload.get("groups", {})
    all_times = [t for g in groups.values() for t in g.get("times", [])]
    t_max = max(all_times) if all_times else 1.0
    colors = {"high_risk": "#b2401f", "low_risk": "#1f6fb2"}
    for name in sorted(groups):
        g = groups[name]
        xs, ys = [0.0], [1.0]
        for t, s in zip(g.get("times", []), g.get("survival", [])):
            xs.append(float(t))
            ys.append(ys[-1])
            xs.append(float(t))
            ys.append(float(s))
        xs.append(t_max)
        ys.append(ys[-1])
        px, py = _to_px(xs, ys, (0, t_max), (0, 1))
        parts.append(_polyline(px, py, colors.get(name, "#444444")))
    parts.append("</svg>")
    return ("\n".join(parts) + "\n").encode()


def bars_svg(entries: list[tuple[str, float, float, float]], title: str) -> bytes:
    parts = _svg_open(title)
    parts += _axes("task", "point estimate")
    n = max(len(entries), 1)
    span = _W - 2 * _PAD
    for i, (name, point, lo, hi) in enumerate(entries):
        cx = _PAD + span * (i + 0.5) / n
        bw = max(span / n * 0.6, 4.0)
        _, py = _to_px([0], [max(min(point, 1.0), 0.0)], (0, 1), (0, 1))
        y_base = _H - _PAD
        parts.append(f'<rect x="{_fmt(cx - bw / 2)}" y="{_fmt(py[0])}" '
                     f'width="{_fmt(bw)}" height="{_fmt(y_base - py[0])}" '
                     f'fill="#1f6fb2"/>')
        _, plo = _to_px([0], [max(min(lo, 1.0), 0.0)], (0, 1), (0, 1))
        _, phi = _to_px([0], [max(min(hi, 1.0), 0.0)], (0, 1), (0, 1))
        parts.append(f'<line x1="{_fmt(cx)}" y1="{_fmt(plo[0])}" x2="{_fmt(cx)}" '
                     f'y2="{_fmt(phi[0])}" stroke="black"/>')
        parts.append(f'<text x="{_fmt(cx)}" y="{_H - _PAD + 14}" text-anchor="middle" '
                     f'font-size="9" font-family="sans-serif">{name}</text>')
    parts.append("</svg>")
    return ("\n".join(parts) + "\n").encode()


# -- report aggregation --------------------------------------------------------------------

def report_emit(results_dir: str | Path, out_dir: str | Path) -> dict:
    """Aggregate every result artifact under ``results_dir`` into one report.

    Emits report.json plus deterministic SVGs (pooled ROC per binary task,
    few-shot curves, KM curves, a per-task bar chart).
    """
    results_dir = Path(results_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    tasks, fewshots, crossmodal, registration, promptseg = [], [], [], [], []
    for path in sorted(results_dir.rglob("*.json")):
        try:
            payload = json.loads(path.read_text("utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: malformed result file: {exc}") from exc
        if not isinstance(payload, dict):
            continue
        rel = str(path.relative_to(results_dir))
        if path.name == "metric_report.json":
            tasks.append({"path": rel, "report": payload})
        elif path.name == "fewshot.json":
            fewshots.append({"path": rel, "sweep": payload})
        elif path.name == "crossmodal.json":
            crossmodal.append({"path": rel, "result": payload})
        elif {"fixed_id", "moving_id", "dz"} <= payload.keys():
            registration.append({"path": rel, "result": payload})
        elif {"per_label", "overall", "prompt_kind"} <= payload.keys():
            promptseg.append({"path": rel, "result": payload})

    report = {
        "tasks": tasks,
        "fewshot": fewshots,
        "crossmodal": crossmodal,
        "registration": registration,
        "prompted_segmentation": promptseg,
        "totals": {
            "tasks": len(tasks),
            "fewshot": len(fewshots),
            "crossmodal": len(crossmodal),
            "registration": len(registration),
            "prompted_segmentation": len(promptseg),
        },
    }
    (out_dir / "report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True), "utf-8")

    for entry in tasks:
        rep = entry["report"]
        if rep.get("metric") != "auroc":
            continue
        task_dir = results_dir / Path(entry["path"]).parent
        run_files = sorted(task_dir.glob("runresult_run*.csv"))
        if not run_files:
            continue
        from ..stats import pooled_roc
        runs = [read_run_result(p) for p in run_files]
        points, auc = pooled_roc(runs)
        name = rep.get("extra", {}).get("task_id", Path(entry["path"]).parent.name)
        (out_dir / f"roc_{_slug(name)}.svg").write_bytes(roc_svg(points, auc, name))

    for entry in fewshots:
        sweep = entry["sweep"]
        name = sweep.get("task_id", "fewshot")
        (out_dir / f"fewshot_{_slug(name)}.svg").write_bytes(
            fewshot_svg(sweep, f"few-shot: {name}"))

    for entry in tasks:
        km = entry["report"].get("extra", {}).get("km")
        if km:
            name = entry["report"].get("extra", {}).get("task_id", "survival")
            (out_dir / f"km_{_slug(name)}.svg").write_bytes(
                km_svg(km, f"KM groups: {name}"))

    if tasks:
        entries = []
        for entry in tasks:
            rep = entry["report"]
            name = rep.get("extra", {}).get("task_id", Path(entry["path"]).parent.name)
            entries.append((name, rep["point"], rep["ci_low"], rep["ci_high"]))
        (out_dir / "bars.svg").write_bytes(bars_svg(entries, "task points (95% CI)"))
    return report


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in name)
