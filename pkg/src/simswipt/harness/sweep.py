"""Sweep orchestration: axis x policy grids of averaged realizations.

Each cell of a sweep averages the per-realization metrics over R seeded
network drops.  Cells and realizations are deterministic given (config,
master seed): substreams are derived from coordinates, worker threads
only change wall-clock order, and the reduction always runs in
realization order.  A failed realization is counted and skipped; the cell
keeps the survivors so a sweep never dies halfway.
"""

import csv
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .config import ConfigError
from .scenario import METRICS, evaluate_realization, report_metrics

# sweep axis name -> config key it overrides
AXES = {
    "M": "topo.m",
    "S": "geom.s",
    "L": "geom.l",
    "T_SIM": "geom.thickness",
    "S_ki": "sys.qos_se",
    "kappa": "topo.kappa",
}

_INT_AXES = ("M", "S", "L")

CSV_FIELDS = ("axis", "value", "policy", "metric", "mean", "stderr",
              "n", "failures", "config_hash")


def _cell(cfg, policy_name):
    """Metrics of one (value, policy) cell: (means, stderrs, n, failures)."""
    realizations = cfg.get("run.realizations")
    workers = max(1, cfg.get("run.workers"))

    def one(index):
        try:
            report = evaluate_realization(cfg, index, policy_name)
            return report_metrics(report)
        except Exception:
            return None

    if workers == 1:
        results = [one(r) for r in range(realizations)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, range(realizations)))

    kept = [res for res in results if res is not None]
    failures = realizations - len(kept)
    means, stderrs = {}, {}
    for metric in METRICS:
        values = np.array([res[metric] for res in kept], dtype=float)
        if values.size == 0:
            means[metric] = float("nan")
            stderrs[metric] = float("nan")
        else:
            means[metric] = float(values.mean())
            spread = float(values.std(ddof=1)) if values.size > 1 else 0.0
            stderrs[metric] = spread / np.sqrt(values.size)
    return means, stderrs, len(kept), failures


def run_sweep(cfg, axis, values):
    """Long-format rows for every (value, policy, metric) combination."""
    if axis not in AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; have {sorted(AXES)}")
    key = AXES[axis]
    policies = cfg.policy_combos()
    rows = []
    for value in values:
        typed = int(value) if axis in _INT_AXES else float(value)
        point = cfg.replace(**{key.replace(".", "__"): typed})
        for policy_name in policies:
            means, stderrs, n, failures = _cell(point, policy_name)
            for metric in METRICS:
                rows.append({
                    "axis": axis,
                    "value": repr(float(typed)),
                    "policy": policy_name,
                    "metric": metric,
                    "mean": repr(means[metric]),
                    "stderr": repr(stderrs[metric]),
                    "n": n,
                    "failures": failures,
                    "config_hash": cfg.hash,
                })
    return rows


def write_sweep_csv(rows, path):
    """Deterministic long-format CSV (repr floats, CRLF rows)."""
    with open(path, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=CSV_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
