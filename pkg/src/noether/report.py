"""Output writers: CSV and JSONL trajectories and minimal two-axis SVG line charts."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .dynamics import Trajectory

VECTOR_COLUMNS_MAX = 16  # 1-D monitors up to this length get one column per component
JSON_MATRIX_MAX = 64  # matrices smaller than this (per side) are stored in full


def fmt(x) -> str:
    """17 significant digits, so every float64 round-trips."""
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.17g}"


def _expand(name: str, value) -> list[tuple[str, float]]:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        return [(name, float(arr))]
    if arr.ndim == 1 and arr.size <= VECTOR_COLUMNS_MAX:
        return [(f"{name}_{i}", float(x)) for i, x in enumerate(arr)]
    suffix = "fro" if arr.ndim == 2 else "norm"
    return [(f"{name}_{suffix}", float(np.linalg.norm(arr)))]


def flat_columns(traj: Trajectory) -> tuple[list[str], list[list[float]]]:
    """Header and rows: ``step, t, loss`` then the scalar columns of every monitor, in registration order."""
    header = ["step", "t", "loss"]
    rows = []
    for j, rec in enumerate(traj.records):
        cols = []
        for name, value in rec.quantities.items():
            cols += _expand(name, value)
        if j == 0:
            header += [c for c, _ in cols]
        rows.append([rec.k, rec.t, rec.loss] + [v for _, v in cols])
    return header, rows


def write_csv(traj: Trajectory, path) -> list[str]:
    header, rows = flat_columns(traj)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for row in rows:
            w.writerow([str(int(row[0]))] + [fmt(x) for x in row[1:]])
    return header


def _json_value(value):
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        return float(arr)
    if arr.ndim == 1:
        return arr.tolist()
    out = {"fro": float(np.linalg.norm(arr))}
    if max(arr.shape) < JSON_MATRIX_MAX:
        out["matrix"] = arr.tolist()
    return out


def _finite(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return fmt(obj)
    if isinstance(obj, list):
        return [_finite(o) for o in obj]
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    return obj


def write_jsonl(traj: Trajectory, path) -> None:
    with Path(path).open("w") as fh:
        for rec in traj.records:
            line = {
                "step": rec.k,
                "t": rec.t,
                "loss": rec.loss,
                "quantities": {k: _json_value(v) for k, v in rec.quantities.items()},
            }
            fh.write(json.dumps(_finite(line), allow_nan=False) + "\n")
        if traj.diverged:
            fh.write(json.dumps({"truncated_at": traj.truncated_at, "message": traj.message}) + "\n")


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(_finite(obj), indent=2, allow_nan=False) + "\n")


# ---------------------------------------------------------------------------
# SVG
# ---------------------------------------------------------------------------

_W, _H = 640, 400
_PAD = dict(left=80, right=80, top=40, bottom=50)


def _range(y: np.ndarray) -> tuple[float, float]:
    y = y[np.isfinite(y)]
    if y.size == 0:
        return 0.0, 1.0
    lo, hi = float(y.min()), float(y.max())
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        pad = max(abs(hi) * 1e-3, 1e-12)
        return lo - pad, hi + pad
    return lo, hi


def _polyline(x, y, xr, yr, color) -> str:
    pw = _W - _PAD["left"] - _PAD["right"]
    ph = _H - _PAD["top"] - _PAD["bottom"]
    pts = []
    for a, b in zip(x, y):
        if not (math.isfinite(a) and math.isfinite(b)):
            continue
        px = _PAD["left"] + (a - xr[0]) / (xr[1] - xr[0]) * pw
        py = _PAD["top"] + (1.0 - (b - yr[0]) / (yr[1] - yr[0])) * ph
        pts.append(f"{px:.2f},{py:.2f}")
    return f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{" ".join(pts)}"/>'


def _ticks(r, n=5):
    return [r[0] + (r[1] - r[0]) * i / (n - 1) for i in range(n)]


def svg_two_axis(x: Sequence[float], left: Sequence[float], right: Sequence[float],
                 left_label: str, right_label: str, x_label: str = "t", title: str = "") -> str:
    """Line chart with independent left and right y-axes (SVG 1.1)."""
    x = np.asarray(x, dtype=np.float64)
    yl = np.asarray(left, dtype=np.float64)
    yr_ = np.asarray(right, dtype=np.float64)
    xr = _range(x)
    lr, rr = _range(yl), _range(yr_)
    x0, x1 = _PAD["left"], _W - _PAD["right"]
    y0, y1 = _PAD["top"], _H - _PAD["bottom"]
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>',
        f'<rect x="{x0}" y="{y0}" width="{x1 - x0}" height="{y1 - y0}" fill="none" stroke="#444"/>',
    ]
    if title:
        out.append(f'<text x="{_W / 2}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>')
    for v in _ticks(xr):
        px = x0 + (v - xr[0]) / (xr[1] - xr[0]) * (x1 - x0)
        out.append(f'<text x="{px:.2f}" y="{y1 + 16}" text-anchor="middle" font-size="10">{v:.3g}</text>')
    for v in _ticks(lr):
        py = y1 - (v - lr[0]) / (lr[1] - lr[0]) * (y1 - y0)
        out.append(f'<text x="{x0 - 6}" y="{py + 3:.2f}" text-anchor="end" font-size="10" '
                   f'fill="#1f77b4">{v:.4g}</text>')
    for v in _ticks(rr):
        py = y1 - (v - rr[0]) / (rr[1] - rr[0]) * (y1 - y0)
        out.append(f'<text x="{x1 + 6}" y="{py + 3:.2f}" text-anchor="start" font-size="10" '
                   f'fill="#d62728">{v:.4g}</text>')
    out.append(_polyline(x, yl, xr, lr, "#1f77b4"))
    out.append(_polyline(x, yr_, xr, rr, "#d62728"))
    out.append(f'<text x="{(x0 + x1) / 2}" y="{_H - 12}" text-anchor="middle" font-size="12">'
               f'{escape(x_label)}</text>')
    out.append(f'<text x="18" y="{(y0 + y1) / 2}" text-anchor="middle" font-size="12" fill="#1f77b4" '
               f'transform="rotate(-90 18 {(y0 + y1) / 2})">{escape(left_label)}</text>')
    out.append(f'<text x="{_W - 18}" y="{(y0 + y1) / 2}" text-anchor="middle" font-size="12" '
               f'fill="#d62728" transform="rotate(90 {_W - 18} {(y0 + y1) / 2})">{escape(right_label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_plots(traj: Trajectory, out_dir, columns: Optional[Sequence[str]] = None) -> list[Path]:
    """One ``plot_<column>.svg`` per monitor column: loss on the left axis, the column on the right."""
    header, rows = flat_columns(traj)
    data = np.array(rows, dtype=np.float64) if rows else np.zeros((0, len(header)))
    monitor_cols = header[3:]
    wanted = monitor_cols if columns is None else list(columns)
    unknown = [c for c in wanted if c not in monitor_cols]
    if unknown:
        raise KeyError(f"unknown plot columns {unknown}; available: {monitor_cols}")
    paths = []
    for col in wanted:
        j = header.index(col)
        path = Path(out_dir) / f"plot_{col}.svg"
        path.write_text(svg_two_axis(data[:, 1], data[:, 2], data[:, j], "loss", col, title=col))
        paths.append(path)
    return paths


def format_table(rows: list[dict], columns: Sequence[str]) -> str:
    def cell(v):
        if isinstance(v, float):
            return f"{v:.3e}"
        return "-" if v is None else str(v)

    body = [[cell(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines)


__all__ = [
    "flat_columns",
    "fmt",
    "format_table",
    "svg_two_axis",
    "write_csv",
    "write_json",
    "write_jsonl",
    "write_plots",
]
