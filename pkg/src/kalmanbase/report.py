"""File writers for evaluation results.

All outputs are deterministic: fixed column order, fixed float formatting and
sorted JSON keys, so regenerating from the same inputs gives identical bytes.
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .exceptions import DataError
from .metrics import CovarianceReport, MultiModalMetrics, StepMetrics

SUMMARY_SECONDS = (1, 2, 3, 4, 5)
FROBENIUS_LIMIT = 0.10
BIAS_LIMIT = 0.05

STEP_COLUMNS = (("rmse", "rmse_m"), ("fde", "fde_m"), ("mr", "mr"), ("mnll", "mnll_nats"))
MM_COLUMNS = (("p_rmse", "p_rmse_m"), ("rmse_maxp", "rmse_maxp_m"), ("min_rmse", "min_rmse_m"),
              ("p_fde", "p_fde_m"), ("fde_maxp", "fde_maxp_m"), ("min_fde", "min_fde_m"),
              ("nll_mm", "nll_mm_nats"), ("mr_mm", "mr_mm"), ("sim", "sim_per_m4"))
TABLE_ROWS = {"rmse": "RMSE (m)", "fde": "FDE (m)", "mr": "MR", "mnll": "NLL (nats)",
              "p_rmse": "pRMSE (m)", "rmse_maxp": "RMSE max-p (m)", "min_rmse": "minRMSE (m)",
              "p_fde": "pFDE (m)", "fde_maxp": "FDE max-p (m)", "min_fde": "minFDE (m)",
              "nll_mm": "NLL (nats)", "mr_mm": "MR", "sim": "Sim (1/m^4)"}


def fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return format(float(x), ".10g")


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_step_csv(path, metrics, columns, dt: float) -> None:
    arrays = [getattr(metrics, name) for name, _ in columns]
    k = len(arrays[0])
    rows = []
    for i in range(k):
        row = [i + 1, fmt((i + 1) * dt)]
        row += [fmt(a[i]) if a is not None else "" for a in arrays]
        rows.append(row)
    _write_rows(path, ["step", "t_s", *[label for _, label in columns]], rows)


def read_step_csv(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"metrics file not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DataError(f"no rows in {path}")
    return {key: np.array([float(r[key]) if r[key] != "" else np.nan for r in rows])
            for key in rows[0]}


def _at_seconds(arr, dt, seconds):
    out = []
    for t in seconds:
        k = int(round(t / dt))
        out.append(float(arr[k - 1]) if arr is not None and k <= len(arr) else None)
    return out


def summary(steps: StepMetrics, dt: float, multimodal: MultiModalMetrics | None = None,
            model: str = "cv", n_samples: int | None = None) -> dict:
    """Indicators at 1 to 5 s, one row per indicator as in a results table."""
    out = {
        "model": model,
        "n_samples": n_samples,
        "horizon_s": list(SUMMARY_SECONDS),
        "unimodal": {label: _at_seconds(getattr(steps, name), dt, SUMMARY_SECONDS)
                     for name, label in STEP_COLUMNS},
    }
    if multimodal is not None:
        out["multimodal"] = {label: _at_seconds(getattr(multimodal, name), dt, SUMMARY_SECONDS)
                             for name, label in MM_COLUMNS}
    return out


def calibration_flags(report: CovarianceReport) -> dict:
    frob = report.frobenius_ratio
    bias = report.bias_ratio
    return {
        "frobenius_limit": FROBENIUS_LIMIT,
        "frobenius_ratio": dict(zip(map(fmt, report.seconds), map(float, frob))),
        "frobenius": "PASS" if np.all(frob < FROBENIUS_LIMIT) else "FAIL",
        "bias_limit": BIAS_LIMIT,
        "max_bias_over_rmse": float(np.max(bias)),
        "bias": "PASS" if np.all(bias < BIAS_LIMIT) else "FAIL",
    }


def tables_markdown(summary_dict: dict, flags: dict | None = None) -> str:
    secs = summary_dict["horizon_s"]
    lines = [f"# Results: {summary_dict['model']} (n = {summary_dict['n_samples']})", ""]
    sections = [("Unimodal", summary_dict["unimodal"], STEP_COLUMNS)]
    if "multimodal" in summary_dict:
        sections.append(("Multi-modal", summary_dict["multimodal"], MM_COLUMNS))
    for title, rows, columns in sections:
        lines += [f"## {title}", "", "| Indicator | " + " | ".join(f"{t} s" for t in secs) + " |",
                  "|---" * (len(secs) + 1) + "|"]
        for name, label in columns:
            vals = ["" if v is None else f"{v:.2f}" for v in rows[label]]
            lines.append(f"| {TABLE_ROWS[name]} | " + " | ".join(vals) + " |")
        lines.append("")
    if flags is not None:
        lines += ["## Covariance calibration", "",
                  f"- empirical vs mean predicted covariance (Frobenius ratio < {flags['frobenius_limit']}): "
                  f"**{flags['frobenius']}** "
                  + ", ".join(f"{t} s: {v:.3f}" for t, v in flags["frobenius_ratio"].items()),
                  f"- error bias below {flags['bias_limit']:.0%} of RMSE at every step: **{flags['bias']}** "
                  f"(max {flags['max_bias_over_rmse']:.3f})", ""]
    return "\n".join(lines)


def ellipse_svg(report: CovarianceReport, size: int = 640, margin: int = 50) -> str:
    """Per-axis mean absolute error curve in blue, empirical error covariance
    ellipses in green and mean predicted ones in red, centered on the curve."""
    curve = np.asarray(report.fde_curve)
    steps = [int(round(t / report.dt)) - 1 for t in report.seconds]
    ell = report.ellipses()
    pts = [np.zeros(2), *curve]
    for e, k in zip(ell, steps):
        r = max(e["empirical"]["major"], e["predicted"]["major"])
        c = curve[k]
        pts += [c - r, c + r]
    pts = np.array(pts)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = float(max(hi - lo)) or 1.0
    scale = (size - 2 * margin) / span

    def to_px(p):
        return margin + (p[0] - lo[0]) * scale, size - margin - (p[1] - lo[1]) * scale

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
           f'viewBox="0 0 {size} {size}">',
           f'<rect width="{size}" height="{size}" fill="white"/>']
    ox, oy = to_px(lo)
    out.append(f'<line x1="{margin}" y1="{oy:.2f}" x2="{size - margin}" y2="{oy:.2f}" stroke="black"/>')
    out.append(f'<line x1="{ox:.2f}" y1="{margin}" x2="{ox:.2f}" y2="{size - margin}" stroke="black"/>')
    out.append(f'<text x="{size / 2:.0f}" y="{size - 12}" text-anchor="middle" font-size="13">'
               f'FDE_x (m)</text>')
    out.append(f'<text x="14" y="{size / 2:.0f}" font-size="13" transform="rotate(-90 14 {size / 2:.0f})" '
               f'text-anchor="middle">FDE_y (m)</text>')
    for tick in (lo[0], lo[0] + span):
        x, _ = to_px((tick, lo[1]))
        out.append(f'<text x="{x:.2f}" y="{oy + 16:.2f}" text-anchor="middle" font-size="11">{tick:.2f}</text>')
    path = " ".join(f"{x:.2f},{y:.2f}" for x, y in map(to_px, curve))
    out.append(f'<polyline points="{path}" fill="none" stroke="blue" stroke-width="2"/>')
    for e, k in zip(ell, steps):
        cx, cy = to_px(curve[k])
        for key, colour in (("empirical", "green"), ("predicted", "red")):
            p = e[key]
            angle = -math.degrees(p["angle"])
            out.append(f'<ellipse cx="{cx:.2f}" cy="{cy:.2f}" rx="{p["major"] * scale:.2f}" '
                       f'ry="{p["minor"] * scale:.2f}" transform="rotate({angle:.3f} {cx:.2f} {cy:.2f})" '
                       f'fill="none" stroke="{colour}" stroke-width="1.5"/>')
        out.append(f'<text x="{cx + 4:.2f}" y="{cy - 4:.2f}" font-size="11">{fmt(e["t"])} s</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_predictions_csv(path, means, covs, probs=None) -> None:
    """One row per sample, mode and step; ``means`` (N, M, K, 2)."""
    n, m, k = means.shape[:3]
    probs = np.ones(m) if probs is None else np.asarray(probs)
    rows = []
    for i in range(n):
        for j in range(m):
            for s in range(k):
                c = covs[i, j, s]
                rows.append([i, j, fmt(probs[j]), s + 1, fmt(means[i, j, s, 0]), fmt(means[i, j, s, 1]),
                             fmt(c[0, 0]), fmt(c[0, 1]), fmt(c[1, 1])])
    _write_rows(path, ["sample_id", "mode", "prob", "step", "x_m", "y_m", "sxx_m2", "sxy_m2", "syy_m2"], rows)


def write_exploration_csv(path, values) -> None:
    rows = [[i, fmt(t), fmt(a)] for i, (t, a) in enumerate(np.asarray(values))]
    _write_rows(path, ["sample_id", "heading_change_rad", "velocity_factor"], rows)


def exploration_histogram(values, theta_range=(-0.3, 0.3), alpha_range=(0.0, 2.0), bins=(30, 40)):
    v = np.asarray(values, dtype=float)
    v = v[np.all(np.isfinite(v), axis=1)]
    counts, te, ae = np.histogram2d(v[:, 0], v[:, 1], bins=bins, range=[theta_range, alpha_range])
    return counts.astype(int), te, ae


def write_histogram_csv(path, values, **kw) -> None:
    counts, te, ae = exploration_histogram(values, **kw)
    rows = [[fmt(te[i]), fmt(te[i + 1]), fmt(ae[j]), fmt(ae[j + 1]), int(counts[i, j])]
            for i in range(len(te) - 1) for j in range(len(ae) - 1)]
    _write_rows(path, ["heading_lo_rad", "heading_hi_rad", "velocity_factor_lo", "velocity_factor_hi",
                       "count"], rows)


def read_exploration_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([[float(r["heading_change_rad"]) if r["heading_change_rad"] else np.nan,
                      float(r["velocity_factor"]) if r["velocity_factor"] else np.nan] for r in rows]
                    ).reshape(-1, 2)


def build_report(metrics_dir, out_dir=None) -> list[Path]:
    """Tables, calibration flags, ellipse SVG and histogram from an eval directory."""
    metrics_dir = Path(metrics_dir)
    out_dir = Path(out_dir) if out_dir else metrics_dir
    needed = [metrics_dir / "summary.json", metrics_dir / "covariance.json"]
    for p in needed:
        if not p.exists():
            raise DataError(f"report input not found: {p}")
    summ = json.loads(needed[0].read_text())
    cov = CovarianceReport.from_dict(json.loads(needed[1].read_text()))
    out_dir.mkdir(parents=True, exist_ok=True)
    flags = calibration_flags(cov)
    written = []
    for name, text in (("tables.md", tables_markdown(summ, flags)), ("ellipses.svg", ellipse_svg(cov))):
        (out_dir / name).write_text(text)
        written.append(out_dir / name)
    dump_json(flags, out_dir / "calibration.json")
    written.append(out_dir / "calibration.json")
    explo = metrics_dir / "exploration.csv"
    if explo.exists():
        write_histogram_csv(out_dir / "exploration_histogram.csv", read_exploration_csv(explo))
        written.append(out_dir / "exploration_histogram.csv")
    return written
