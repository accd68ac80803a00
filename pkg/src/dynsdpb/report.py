"""Aggregate finished runs into a per-mode comparison and grad-norm trajectories."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError
from .metrics import read_gradnorms, write_gradnorms

# Config keys that define the task; runs differing in any of them are not comparable.
TASK_KEYS = ("task", "num_classes", "dim", "n_train", "n_test", "label_noise", "separation",
             "vocab_size", "min_str_len", "max_str_len", "min_digits", "max_digits")


def load_run(run_dir):
    run_dir = Path(run_dir)
    summary_path = run_dir / "summary.json"
    if not summary_path.is_file():
        raise ConfigError(f"{run_dir} is not a completed run (no summary.json)")
    summary = json.loads(summary_path.read_text())
    config = yaml.safe_load((run_dir / "config.yaml").read_text())
    return summary, config


def _task_signature(config):
    return tuple((k, config.get(k)) for k in TASK_KEYS)


def aggregate(run_dirs):
    """Mode -> ``{"n", "mean", "std", "accuracies", "runs"}``; std is the sample std (0 for n=1)."""
    if not run_dirs:
        raise ConfigError("report needs at least one run directory")
    runs = [(Path(d), *load_run(d)) for d in run_dirs]
    first_dir, _, first_cfg = runs[0]
    sig = _task_signature(first_cfg)
    for d, _, cfg in runs[1:]:
        other = _task_signature(cfg)
        if other != sig:
            diff = [f"{k}: {a!r} vs {b!r}" for (k, a), (_, b) in zip(sig, other) if a != b]
            raise ConfigError(
                f"runs {first_dir} and {d} are on different tasks ({'; '.join(diff)}); "
                "accuracies are not comparable")
    groups: dict = {}
    for d, summary, _ in runs:
        g = groups.setdefault(summary["mode"], {"accuracies": [], "runs": []})
        g["accuracies"].append(summary["best_accuracy"])
        g["runs"].append(d)
    for g in groups.values():
        acc = np.array(g["accuracies"], dtype=np.float64)
        g["n"] = len(acc)
        g["mean"] = float(acc.mean())
        g["std"] = float(acc.std(ddof=1)) if len(acc) > 1 else 0.0
    return groups


def mean_gradnorm_trajectory(run_dirs):
    """Per-iteration mean over runs of each layer's gradient norm."""
    layers, by_iter = None, {}
    for d in run_dirs:
        path = Path(d) / "gradnorms.csv"
        if not path.is_file():
            continue
        cols, rows = read_gradnorms(path)
        if layers is None:
            layers = cols
        elif cols != layers:
            raise ConfigError(f"{path}: layer columns differ from other runs")
        for it, norms in rows:
            by_iter.setdefault(it, []).append(norms)
    if layers is None:
        return None, []
    rows = [(it, {k: float(np.mean([r[k] for r in rs])) for k in layers})
            for it, rs in sorted(by_iter.items())]
    return layers, rows


def write_report(run_dirs, out_dir):
    """Write ``comparison.csv`` and one ``gradnorms_<mode>.csv`` per mode that logged norms."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    groups = aggregate(run_dirs)
    with open(out / "comparison.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "n", "mean_accuracy", "std_accuracy"])
        for mode, g in groups.items():
            w.writerow([mode, g["n"], repr(g["mean"]), repr(g["std"])])
    written = [out / "comparison.csv"]
    for mode, g in groups.items():
        layers, rows = mean_gradnorm_trajectory(g["runs"])
        if layers:
            path = out / f"gradnorms_{mode}.csv"
            write_gradnorms(path, layers, rows)
            written.append(path)
    return groups, written
