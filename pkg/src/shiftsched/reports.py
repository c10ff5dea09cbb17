"""CSV, SVG, and summary emission for pipeline runs.

All numeric output is fixed decimal with 9 significant digits, files are
written atomically (write to a temp name, then rename), and empty logs still
produce valid header-only CSVs.  The SVG plots are deliberately minimal:
axes, polylines, dashed bound lines.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .scenario_io import RunReport

_PALETTE = ("#1f6fb2", "#b23a1f", "#3ba05e", "#8455b2", "#b2861f",
            "#1fb2a4", "#b21f77", "#6db21f", "#474747", "#7c9cb8")


def fmt9(x) -> str:
    """Fixed-decimal rendering with 9 significant digits."""
    if x is None:
        return ""
    x = float(x)
    if not np.isfinite(x):
        return "inf" if x > 0 else ("-inf" if x < 0 else "nan")
    if x == 0.0:
        return "0"
    return np.format_float_positional(x, precision=9, unique=False,
                                      fractional=False, trim="-")


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(cell if isinstance(cell, str) else fmt9(cell)
                              for cell in row))
    _atomic_write(path, "\n".join(lines) + "\n")


def _svg_plot(path: Path, series: list[dict], title: str, xlabel: str,
              ylabel: str, hlines: Sequence[float] = ()) -> None:
    """Polyline plot: series entries carry x, y arrays and a name."""
    width, height = 860.0, 420.0
    ml, mr, mt, mb = 60.0, 20.0, 30.0, 45.0
    xs = np.concatenate([np.asarray(s["x"], dtype=float) for s in series]) \
        if series else np.array([0.0, 1.0])
    ys_list = [np.asarray(s["y"], dtype=float) for s in series]
    ys = np.concatenate(ys_list + [np.asarray(hlines, dtype=float)]) \
        if (series or len(hlines)) else np.array([0.0, 1.0])
    ys = ys[np.isfinite(ys)]
    if not len(ys):
        ys = np.array([0.0, 1.0])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 <= x0:
        x1 = x0 + 1.0
    if y1 <= y0:
        y1 = y0 + 1.0
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad
    pw, ph = width - ml - mr, height - mt - mb

    def sx(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return mt + (y1 - y) / (y1 - y0) * ph

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:g}" '
             f'height="{height:g}" viewBox="0 0 {width:g} {height:g}">',
             f'<rect width="{width:g}" height="{height:g}" fill="white"/>',
             f'<text x="{width / 2:g}" y="18" text-anchor="middle" '
             f'font-size="14">{title}</text>']
    # axes
    parts.append(f'<line x1="{ml:g}" y1="{mt:g}" x2="{ml:g}" '
                 f'y2="{height - mb:g}" stroke="black"/>')
    parts.append(f'<line x1="{ml:g}" y1="{height - mb:g}" '
                 f'x2="{width - mr:g}" y2="{height - mb:g}" stroke="black"/>')
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        xv = x0 + frac * (x1 - x0)
        yv = y0 + frac * (y1 - y0)
        parts.append(f'<text x="{sx(xv):.1f}" y="{height - mb + 16:g}" '
                     f'text-anchor="middle" font-size="10">{fmt9(xv)}</text>')
        parts.append(f'<text x="{ml - 6:g}" y="{sy(yv):.1f}" '
                     f'text-anchor="end" font-size="10">{fmt9(yv)}</text>')
    parts.append(f'<text x="{width / 2:g}" y="{height - 8:g}" '
                 f'text-anchor="middle" font-size="12">{xlabel}</text>')
    parts.append(f'<text x="14" y="{height / 2:g}" text-anchor="middle" '
                 f'font-size="12" transform="rotate(-90 14 '
                 f'{height / 2:g})">{ylabel}</text>')
    for h in hlines:
        parts.append(f'<line x1="{ml:g}" y1="{sy(h):.2f}" '
                     f'x2="{width - mr:g}" y2="{sy(h):.2f}" stroke="#777" '
                     f'stroke-dasharray="6 4"/>')
    for k, s in enumerate(series):
        color = _PALETTE[k % len(_PALETTE)]
        x = np.asarray(s["x"], dtype=float)
        y = np.asarray(s["y"], dtype=float)
        keep = min(len(x), 2000)
        idx = np.linspace(0, len(x) - 1, keep).astype(int) if len(x) > keep \
            else np.arange(len(x))
        pts = " ".join(f"{sx(x[i]):.2f},{sy(y[i]):.2f}" for i in idx)
        parts.append(f'<polyline fill="none" stroke="{color}" '
                     f'stroke-width="1.2" points="{pts}"/>')
        parts.append(f'<text x="{width - mr - 4:g}" y="{mt + 14 * (k + 1):g}" '
                     f'text-anchor="end" font-size="10" '
                     f'fill="{color}">{s["name"]}</text>')
    parts.append("</svg>")
    _atomic_write(path, "\n".join(parts) + "\n")


def emit_reports(report: RunReport, out_dir: str | Path) -> list[Path]:
    """Write the full report bundle; returns the created file paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc}") from exc
    created: list[Path] = []

    # (a) trajectories with their envelope bounds
    header = ["time_minutes"]
    cols: list[np.ndarray] = [report.plot_times]
    for mon in report.monitors:
        header.append(mon["name"])
        cols.append(np.asarray(mon["values"]))
        if mon.get("lo") is not None:
            header.append(mon["name"] + "_lo")
            cols.append(np.full(len(report.plot_times), mon["lo"]))
        if mon.get("hi") is not None:
            header.append(mon["name"] + "_hi")
            cols.append(np.full(len(report.plot_times), mon["hi"]))
    path = out / "trajectories.csv"
    _csv(path, header, zip(*cols) if len(report.plot_times) else [])
    created.append(path)

    # (b) requested vs scheduled off-take profiles
    header = ["time_minutes"]
    cols = [report.plot_times]
    for s in report.offtake_series:
        header.extend([s["name"] + "_requested", s["name"] + "_scheduled"])
        cols.extend([np.asarray(s["requested"]), np.asarray(s["scheduled"])])
    path = out / "offtakes.csv"
    _csv(path, header, zip(*cols) if len(report.plot_times) else [])
    created.append(path)

    # (c) iteration log
    path = out / "iterations.csv"
    _csv(path, ["index", "kind", "status", "objective", "proven_bound",
                "nodes", "total_time_points", "restriction", "llp_tol",
                "lower", "upper", "wall_seconds"],
         [[k, rec.get("kind", ""), str(rec.get("status", "")),
           rec.get("objective"), rec.get("proven_bound"), rec.get("nodes"),
           rec.get("total_time_points"), rec.get("restriction"),
           rec.get("llp_tol"), rec.get("lower"), rec.get("upper"),
           rec.get("wall")] for k, rec in enumerate(report.log)])
    created.append(path)

    # (d) bound convergence
    path = out / "bounds.csv"
    bound_rows = []
    for k, rec in enumerate(report.log):
        if rec.get("kind") in ("LBD", "UBD", "RES"):
            bound_rows.append([k, rec.get("lower"), rec.get("upper")])
    _csv(path, ["index", "lower_bound", "upper_bound"], bound_rows)
    created.append(path)

    # (e) runtime breakdown
    path = out / "runtime.csv"
    _csv(path, ["category", "seconds"],
         [[k, v] for k, v in sorted(report.runtimes.items())])
    created.append(path)

    # stage-2 trace
    path = out / "stage2.csv"
    _csv(path, ["iter", "cost", "step_norm", "gamma", "trust", "active",
                "worst_margin", "wall_seconds"],
         [[r["iter"], r["cost"], r["step_norm"], r["gamma"], r["trust"],
           r["active"], r["worst_margin"], r.get("wall")]
          for r in report.stage2_trace])
    created.append(path)

    # (g) summary with the certificate chain
    summary = {
        "scenario": report.scenario_name,
        "configuration": report.config_label,
        "status": report.status,
        "feasible": report.feasible,
        "final_cost": _round9(report.final_cost),
        "bounds": {k: _round9(v) for k, v in report.bounds.items()},
        "schedule_shift_minutes": [_round9(t) for t in
                                   (report.schedule.shifts.tolist()
                                    if report.schedule is not None else [])],
        "worst_margin": _round9(report.verification.worst())
        if report.verification is not None else None,
        "verification_step_minutes": _round9(report.verification.grid_step)
        if report.verification is not None else None,
        "wall_seconds": _round9(report.wall_time),
        "counters": report.stage1.counters if report.stage1 else {},
        "stage2_iterations": len(report.stage2_trace),
    }
    path = out / "summary.json"
    _atomic_write(path, json.dumps(summary, indent=1) + "\n")
    created.append(path)

    # (f) minimal SVG plots of (a), (b), (d)
    if len(report.plot_times):
        hlines = sorted({float(m[b]) for m in report.monitors
                         for b in ("lo", "hi") if m.get(b) is not None})
        path = out / "trajectories.svg"
        _svg_plot(path, [{"name": m["name"], "x": report.plot_times,
                          "y": m["values"]} for m in report.monitors],
                  f"{report.scenario_name}: constrained outputs",
                  "time (min)", "output", hlines)
        created.append(path)
        path = out / "offtakes.svg"
        series = []
        for s in report.offtake_series:
            series.append({"name": s["name"] + " req", "x": report.plot_times,
                           "y": s["requested"]})
            series.append({"name": s["name"] + " sch", "x": report.plot_times,
                           "y": s["scheduled"]})
        _svg_plot(path, series, f"{report.scenario_name}: off-take profiles",
                  "time (min)", "load", ())
        created.append(path)
    if bound_rows:
        finite = [r for r in bound_rows
                  if np.isfinite(r[1]) and np.isfinite(r[2])]
        if finite:
            path = out / "bounds.svg"
            _svg_plot(path, [
                {"name": "lower", "x": [r[0] for r in finite],
                 "y": [r[1] for r in finite]},
                {"name": "upper", "x": [r[0] for r in finite],
                 "y": [r[2] for r in finite]}],
                f"{report.scenario_name}: bound convergence",
                "subproblem index", "objective", ())
            created.append(path)
    return created


def _round9(x):
    if x is None:
        return None
    x = float(x)
    if not np.isfinite(x):
        return None
    return float(f"{x:.9g}")
