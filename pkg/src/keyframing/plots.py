"""CSV and dependency-free SVG exports of learning curves and trajectories."""
from __future__ import annotations

import csv
import glob
import json
import os

from .rewards import GROUPS

REWARD_COLUMNS = ["iteration"] + [f"reward_{g}" for g in GROUPS]
COLORS = {"regularization": "#1f77b4", "style": "#2ca02c", "goal": "#d62728"}
W, H, PAD = 640, 400, 50


class EmptyMetricsError(ValueError):
    pass


def load_metrics(run_dir):
    path = os.path.join(run_dir, "metrics.jsonl")
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path) as fh:
        recs = [json.loads(line) for line in fh if line.strip()]
    if not recs:
        raise EmptyMetricsError(f"{path} has no records")
    return recs


def write_reward_csv(path, records):
    """Columns: iteration, reward_regularization, reward_style, reward_goal (blank when unavailable)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REWARD_COLUMNS)
        for r in records:
            w.writerow([r["iteration"]] + ["" if r.get(c) is None else repr(float(r[c])) for c in REWARD_COLUMNS[1:]])


def _scale(vals, lo_px, hi_px):
    lo, hi = min(vals), max(vals)
    span = hi - lo or 1.0
    return lambda v: lo_px + (v - lo) / span * (hi_px - lo_px), lo, hi


def _svg(body, title):
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">\n'
            f'<rect width="{W}" height="{H}" fill="white"/>\n'
            f'<text x="{W / 2}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{title}</text>\n'
            f'<rect x="{PAD}" y="{PAD}" width="{W - 2 * PAD}" height="{H - 2 * PAD}" fill="none" stroke="#888"/>\n'
            + body + "</svg>\n")


def _polyline(xs, ys, color):
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))
    return f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>\n'


def reward_svg(records, title="episodic reward per group (normalized to each group's range)"):
    """One polyline per reward group, each scaled to its own min/max."""
    its = [r["iteration"] for r in records]
    sx, _, _ = _scale(its, PAD, W - PAD)
    body = ""
    for k, g in enumerate(GROUPS):
        pts = [(r["iteration"], r[f"reward_{g}"]) for r in records if r.get(f"reward_{g}") is not None]
        if not pts:
            continue
        sy, lo, hi = _scale([p[1] for p in pts], H - PAD, PAD)
        body += _polyline([sx(p[0]) for p in pts], [sy(p[1]) for p in pts], COLORS[g])
        body += (f'<text x="{PAD + 5}" y="{PAD + 15 + 15 * k}" font-family="sans-serif" font-size="11" '
                 f'fill="{COLORS[g]}">{g} [{lo:.3g}, {hi:.3g}]</text>\n')
    return _svg(body, title)


def trajectory_svg(rows, title):
    xs = [float(r["px"]) for r in rows]
    ys = [float(r["py"]) for r in rows]
    span = max(max(xs) - min(xs), max(ys) - min(ys), 1e-6)
    cx, cy = (max(xs) + min(xs)) / 2, (max(ys) + min(ys)) / 2
    k = min(W, H) - 2 * PAD

    def px(x):
        return W / 2 + (x - cx) / span * k

    def py(y):
        return H / 2 - (y - cy) / span * k

    body = _polyline([px(x) for x in xs], [py(y) for y in ys], "#1f77b4")
    body += f'<circle cx="{px(xs[0]):.2f}" cy="{py(ys[0]):.2f}" r="3" fill="#2ca02c"/>\n'
    body += f'<circle cx="{px(xs[-1]):.2f}" cy="{py(ys[-1]):.2f}" r="3" fill="#d62728"/>\n'
    return _svg(body, title)


def export_plots(run_dir, out_dir=None):
    """Write rewards.csv/rewards.svg for ``run_dir`` and an SVG per trajectory CSV found beneath it."""
    out_dir = out_dir or os.path.join(run_dir, "plots")
    os.makedirs(out_dir, exist_ok=True)
    recs = load_metrics(run_dir)
    written = []
    path = os.path.join(out_dir, "rewards.csv")
    write_reward_csv(path, recs)
    written.append(path)
    path = os.path.join(out_dir, "rewards.svg")
    with open(path, "w") as fh:
        fh.write(reward_svg(recs))
    written.append(path)
    for csv_path in sorted(glob.glob(os.path.join(run_dir, "**", "episode_*.csv"), recursive=True)):
        with open(csv_path) as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            continue
        name = os.path.splitext(os.path.basename(csv_path))[0]
        path = os.path.join(out_dir, f"trajectory_{name}.svg")
        with open(path, "w") as fh:
            fh.write(trajectory_svg(rows, name))
        written.append(path)
    return written
