"""Markdown report and per-task SVG probing charts for a finished run."""

import os
import xml.etree.ElementTree as ET

import numpy as np

from .probing import BASELINE_ID

PALETTE = ["#1b1b1b", "#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd",
           "#8c564b", "#e377c2", "#17becf", "#bcbd22"]


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def line_chart_svg(title: str, x_values, series: dict, x_label: str,
                   y_label: str) -> bytes:
    """A self-contained line chart: one polyline per series, axis labels
    and a legend embedded. Built through ElementTree so it is valid XML."""
    width, height = 640, 420
    left, right, top, bottom = 60, 170, 40, 50
    plot_w = width - left - right
    plot_h = height - top - bottom
    ys = [v for vals in series.values() for v in vals]
    y_min = min(0.0, min(ys)) if ys else 0.0
    y_max = max(100.0, max(ys)) if ys else 100.0

    def sx(i):
        if len(x_values) == 1:
            return left + plot_w / 2
        return left + plot_w * i / (len(x_values) - 1)

    def sy(v):
        return top + plot_h * (1.0 - (v - y_min) / (y_max - y_min))

    svg = ET.Element("svg", {
        "xmlns": "http://www.w3.org/2000/svg",
        "width": str(width), "height": str(height),
        "viewBox": f"0 0 {width} {height}",
    })
    ET.SubElement(svg, "rect", {"x": "0", "y": "0", "width": str(width),
                                "height": str(height), "fill": "white"})
    ET.SubElement(svg, "text", {
        "x": str(left + plot_w / 2), "y": "22", "text-anchor": "middle",
        "font-size": "15", "font-family": "sans-serif", "font-weight": "bold",
    }).text = title
    # axes
    ET.SubElement(svg, "line", {"x1": str(left), "y1": str(top + plot_h),
                                "x2": str(left + plot_w), "y2": str(top + plot_h),
                                "stroke": "black"})
    ET.SubElement(svg, "line", {"x1": str(left), "y1": str(top),
                                "x2": str(left), "y2": str(top + plot_h),
                                "stroke": "black"})
    for i, x in enumerate(x_values):
        ET.SubElement(svg, "text", {
            "x": str(sx(i)), "y": str(top + plot_h + 18), "text-anchor": "middle",
            "font-size": "11", "font-family": "sans-serif"}).text = str(x)
    for tick in np.linspace(y_min, y_max, 6):
        ET.SubElement(svg, "line", {
            "x1": str(left - 4), "y1": str(sy(tick)), "x2": str(left),
            "y2": str(sy(tick)), "stroke": "black"})
        ET.SubElement(svg, "text", {
            "x": str(left - 8), "y": str(sy(tick) + 4), "text-anchor": "end",
            "font-size": "11", "font-family": "sans-serif"}).text = f"{tick:.0f}"
    ET.SubElement(svg, "text", {
        "x": str(left + plot_w / 2), "y": str(height - 12), "text-anchor": "middle",
        "font-size": "12", "font-family": "sans-serif"}).text = x_label
    y_text = ET.SubElement(svg, "text", {
        "x": "16", "y": str(top + plot_h / 2), "text-anchor": "middle",
        "font-size": "12", "font-family": "sans-serif",
        "transform": f"rotate(-90 16 {top + plot_h / 2})"})
    y_text.text = y_label
    # series + legend
    for idx, (name, vals) in enumerate(series.items()):
        color = PALETTE[idx % len(PALETTE)]
        points = " ".join(f"{sx(i):.1f},{sy(v):.1f}" for i, v in enumerate(vals))
        ET.SubElement(svg, "polyline", {
            "points": points, "fill": "none", "stroke": color, "stroke-width": "2"})
        for i, v in enumerate(vals):
            ET.SubElement(svg, "circle", {"cx": f"{sx(i):.1f}", "cy": f"{sy(v):.1f}",
                                          "r": "2.5", "fill": color})
        ly = top + 10 + idx * 18
        lx = left + plot_w + 14
        ET.SubElement(svg, "line", {"x1": str(lx), "y1": str(ly), "x2": str(lx + 22),
                                    "y2": str(ly), "stroke": color,
                                    "stroke-width": "2"})
        ET.SubElement(svg, "text", {
            "x": str(lx + 28), "y": str(ly + 4), "font-size": "11",
            "font-family": "sans-serif"}).text = name
    return ET.tostring(svg, encoding="utf-8", xml_declaration=True)


def emit_probe_charts(per_layer: dict, plots_dir) -> list:
    """One SVG per probing task; series are the initial model plus every
    checkpoint. Returns the file paths written."""
    os.makedirs(plots_dir, exist_ok=True)
    layers = per_layer["layers"]
    paths = []
    for task_id, by_ckpt in sorted(per_layer["tasks"].items()):
        series = {}
        for ckpt in sorted(by_ckpt, key=lambda c: (-1 if c == BASELINE_ID else int(c))):
            name = "initial" if ckpt == BASELINE_ID else f"after task {ckpt}"
            series[name] = by_ckpt[ckpt]
        svg = line_chart_svg(f"probing: {task_id}", layers, series,
                             "encoder layer", "probing accuracy (%)")
        path = os.path.join(plots_dir, f"{task_id}.svg")
        with open(path, "wb") as f:
            f.write(svg)
        paths.append(path)
    return paths


def _matrix_table(matrix) -> list:
    lines = ["| after \\ on | " + " | ".join(matrix.task_ids) + " |",
             "|---" * (len(matrix.task_ids) + 1) + "|"]
    for m, task_id in enumerate(matrix.task_ids):
        cells = []
        for j in range(len(matrix.task_ids)):
            v = matrix.values[m, j]
            cells.append("" if np.isnan(v) else _fmt(v))
        lines.append("| " + task_id + " | " + " | ".join(cells) + " |")
    return lines


def render_report(order_name: str, strategy: str, per_seed: dict,
                  aggregate: dict, matrices: dict, baselines: dict,
                  plots: list, caveats=()) -> str:
    """Markdown summary shaped like a results table: one row per seed plus
    the seed mean, then accuracy matrices and probing chart links."""
    lines = ["# continual-learning run report", ""]
    lines.append(f"- task order: **{order_name}**")
    lines.append(f"- strategy: **{strategy}**")
    lines.append(f"- seeds: {', '.join(str(s) for s in sorted(per_seed))}")
    lines.append("")
    lines.append("## generality and forgetting metrics")
    lines.append("")
    lines.append("| seed | G | GD | SynF | SemF |")
    lines.append("|---|---|---|---|---|")
    for seed in sorted(per_seed):
        r = per_seed[seed]
        lines.append(f"| {seed} | {_fmt(r['g'])} | {_fmt(r['gd'])} | "
                     f"{_fmt(r['synf'])} | {_fmt(r['semf'])} |")
    lines.append(f"| **mean** | {_fmt(aggregate['g'])} | {_fmt(aggregate['gd'])} | "
                 f"{_fmt(aggregate['synf'])} | {_fmt(aggregate['semf'])} |")
    lines.append("")
    if aggregate.get("pearson"):
        lines.append("## correlations across runs")
        lines.append("")
        for key, value in sorted(aggregate["pearson"].items()):
            lines.append(f"- {key.replace('_', ' vs ')}: {value:.3f}")
        lines.append("")
    lines.append("## single-task baselines")
    lines.append("")
    lines.append("| task | " + " | ".join(str(s) for s in sorted(per_seed)) + " |")
    lines.append("|---" * (len(per_seed) + 1) + "|")
    task_ids = next(iter(matrices.values())).task_ids if matrices else []
    for task_id in task_ids:
        row = [f"{baselines[s][task_id]:.2f}" for s in sorted(per_seed)]
        lines.append("| " + task_id + " | " + " | ".join(row) + " |")
    lines.append("")
    for seed in sorted(matrices):
        lines.append(f"## accuracy matrix, seed {seed}")
        lines.append("")
        lines.extend(_matrix_table(matrices[seed]))
        lines.append("")
    if plots:
        lines.append("## per-layer probing curves")
        lines.append("")
        for path in plots:
            name = os.path.basename(path)
            lines.append(f"- [{name}](plots/{name})")
        lines.append("")
    else:
        lines.append("## per-layer probing curves")
        lines.append("")
        lines.append("no probing data")
        lines.append("")
    for caveat in caveats:
        lines.append(f"> {caveat}")
        lines.append("")
    return "\n".join(lines)
