"""
Result tables (text + CSV) and static PNG overlays.
"""
import csv
import glob
import os
from typing import List, Optional, Sequence

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from dpersona import common
from dpersona.evaluation.metrics import EvalReport

NA = "N/A"
RATER_COLORS = ("tab:blue", "tab:green", "tab:orange", "tab:red", "tab:purple", "tab:brown", "tab:pink", "tab:olive")


def report_filename(method: str, sampling_number: Optional[int]) -> str:
    name = method.replace(':', '-')
    if sampling_number is not None:
        name += f"_n{sampling_number}"
    return f"eval_{name}.json"


def save_report(report: EvalReport, out_dir: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, report_filename(report.method, report.sampling_number))
    common.write_json(path, report.to_dict())
    return path


def load_reports(eval_dir: str) -> List[EvalReport]:
    paths = sorted(glob.glob(os.path.join(eval_dir, "**", "eval_*.json"), recursive=True))
    return [EvalReport.from_dict(common.read_json(p)) for p in paths]


def save_per_sample(rows: List[dict], path: str, num_raters: int):
    columns = ["sample_id", "method", "sampling_number", "ged", "dice_soft", "dice_max", "dice_match", "dice_mean"]
    columns += [f"dice_A{i + 1}" for i in range(num_raters)]
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in rows:
            per_rater = row.get('dice_per_rater') or [None] * num_raters
            values = [row.get(c) for c in columns[:8]] + list(per_rater)
            writer.writerow(["" if v is None else v for v in values])


def _fmt(x) -> str:
    return NA if x is None else f"{x:.4f}"


def build_table(reports: Sequence[EvalReport], logger=common.EmptyLogger()) -> List[List[str]]:
    """
    Rows: method, sampling number, GED, Dice_soft, Dice_max, Dice_match, Dice_A1..A_R, Dice_mean.
    """
    num_raters = max((len(r.dice_per_rater) for r in reports if r.dice_per_rater), default=0)
    header = ["Method", "#", "GED", "Dice_soft", "Dice_max", "Dice_match"]
    header += [f"Dice_A{i + 1}" for i in range(num_raters)] + ["Dice_mean"]
    rows = [header]
    for r in sorted(reports, key=lambda r: (r.method, r.sampling_number or 0)):
        if r.dice_max is not None and r.dice_match is not None and r.dice_match > r.dice_max + 1e-8:
            logger.log_error(f"{r.method} #{r.sampling_number}: Dice_match {r.dice_match} > Dice_max {r.dice_max}")
        per_rater = r.dice_per_rater or [None] * num_raters
        rows.append([r.method, "-" if r.sampling_number is None else str(r.sampling_number), _fmt(r.ged),
                     _fmt(r.dice_soft), _fmt(r.dice_max), _fmt(r.dice_match)]
                    + [_fmt(v) for v in per_rater] + [_fmt(r.dice_mean)])
    return rows


def format_table(rows: List[List[str]]) -> str:
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)) for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def write_table_csv(rows: List[List[str]], path: str):
    with open(path, 'w', newline='') as f:
        csv.writer(f).writerows(rows)


def _draw_contours(ax, masks: np.ndarray, colors, linewidth=0.8):
    for mask, color in zip(masks, colors):
        if mask.any() and not mask.all():
            ax.contour(mask.astype(float), levels=[0.5], colors=color, linewidths=linewidth)


def plot_diverse_overlay(image: np.ndarray, preds: np.ndarray, anns: np.ndarray, path: str, title: str = ""):
    """
    Three panels: rater contours, contours of the binarized samples, and per-pixel sample frequency.
    """
    fig, axarr = plt.subplots(1, 3, figsize=(9, 3))
    axarr[0].imshow(image, cmap='gray')
    _draw_contours(axarr[0], anns > 0.5, RATER_COLORS)
    axarr[0].set_title('Annotations')
    axarr[1].imshow(image, cmap='gray')
    _draw_contours(axarr[1], preds > 0.5, ['yellow'] * len(preds), linewidth=0.5)
    axarr[1].set_title(f'{len(preds)} samples')
    axarr[2].imshow((preds > 0.5).mean(0), cmap='viridis', vmin=0, vmax=1)
    axarr[2].set_title('Sample frequency')
    for ax in axarr:
        ax.axis('off')
    if title:
        fig.suptitle(title)
    plt.savefig(path, dpi=100, bbox_inches='tight')
    plt.close(fig)


def plot_personal_overlay(image: np.ndarray, preds: np.ndarray, anns: np.ndarray, path: str, title: str = ""):
    """
    One panel per rater: that rater's annotation (solid color) against the personalized prediction (white).
    """
    R = anns.shape[0]
    fig, axarr = plt.subplots(1, R, figsize=(3 * R, 3), squeeze=False)
    for i in range(R):
        ax = axarr[0, i]
        ax.imshow(image, cmap='gray')
        _draw_contours(ax, anns[i:i + 1] > 0.5, [RATER_COLORS[i % len(RATER_COLORS)]])
        _draw_contours(ax, preds[i:i + 1] > 0.5, ['white'])
        ax.set_title(f'A{i + 1}')
        ax.axis('off')
    if title:
        fig.suptitle(title)
    plt.savefig(path, dpi=100, bbox_inches='tight')
    plt.close(fig)
