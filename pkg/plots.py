"""
Figures for promptpan runs, drawn only from the CSV artifacts of a run
directory: step-wise PQ curve, δ sweep curve and the ordering boxplot.
"""

import os
import logging
from typing import Dict, List, Optional

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt

from utils import read_csv

logger = logging.getLogger(__name__)

STEP_CURVE_CSV = 'step_curve.csv'
DELTA_SWEEP_CSV = 'delta_sweep.csv'
ORDERINGS_CSV = 'orderings.csv'
GROUPS = ('base', 'new', 'all')


def _number(text: str) -> Optional[float]:
    return None if text in ('', '-', None) else float(text)


def _load(run_dir: str, name: str) -> List[dict]:
    path = os.path.join(run_dir, name)
    if not os.path.exists(path):
        return []
    return read_csv(path)


def series(rows: List[dict], x_key: str, y_key: str, group: Optional[str] = None) -> Dict[str, list]:
    """(x, y) points of one column, optionally restricted to one group; '-' cells are skipped."""
    xs, ys = [], []
    for row in rows:
        if group is not None and row.get('group') != group:
            continue
        y = _number(row.get(y_key))
        if y is None:
            continue
        xs.append(float(row[x_key]))
        ys.append(y)
    return {'x': xs, 'y': ys}


def plot_step_curve(rows: List[dict], out_path: str) -> Optional[str]:
    if not rows:
        return None
    plt.figure(figsize=(8, 5))
    for group in GROUPS:
        pts = series(rows, 'step', 'pq', group)
        if pts['x']:
            plt.plot(pts['x'], pts['y'], marker='o', label=group)
    plt.xlabel('Step')
    plt.ylabel('PQ (%)')
    plt.title('PQ after each step')
    plt.legend(loc='best')
    plt.grid(True, alpha=0.3)
    plt.tight_layout()
    plt.savefig(out_path)
    plt.close()
    return out_path


def plot_delta_sweep(rows: List[dict], out_path: str) -> Optional[str]:
    if not rows:
        return None
    plt.figure(figsize=(8, 5))
    for group in GROUPS:
        pts = series(rows, 'delta', f"{group}_pq")
        if pts['x']:
            plt.plot(pts['x'], pts['y'], marker='o', label=group)
    plt.xlabel('delta')
    plt.ylabel('PQ (%)')
    plt.title('Effect of the no-obj scale')
    plt.legend(loc='best')
    plt.grid(True, alpha=0.3)
    plt.tight_layout()
    plt.savefig(out_path)
    plt.close()
    return out_path


def plot_orderings(rows: List[dict], out_path: str) -> Optional[str]:
    data, labels = [], []
    for group in GROUPS:
        values = [v for v in (_number(r.get(f"{group}_pq")) for r in rows) if v is not None]
        if values:
            data.append(values)
            labels.append(group)
    if not data:
        return None
    plt.figure(figsize=(8, 5))
    plt.boxplot(data)
    plt.xticks(range(1, len(labels) + 1), labels)
    plt.ylabel('PQ (%)')
    plt.title(f'PQ over {len(rows)} class orderings')
    plt.grid(True, axis='y', alpha=0.3)
    plt.tight_layout()
    plt.savefig(out_path)
    plt.close()
    return out_path


def emit_plots(run_dir: str) -> List[str]:
    """Render every figure whose CSV exists and holds rows; returns the written paths."""
    written = []
    for csv_name, draw, png in (
        (STEP_CURVE_CSV, plot_step_curve, 'step_curve.png'),
        (DELTA_SWEEP_CSV, plot_delta_sweep, 'delta_sweep.png'),
        (ORDERINGS_CSV, plot_orderings, 'orderings.png'),
    ):
        path = draw(_load(run_dir, csv_name), os.path.join(run_dir, png))
        if path:
            written.append(path)
    logger.info(f"Emitted {len(written)} plots in {run_dir}")
    return written
