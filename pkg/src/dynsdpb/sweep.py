"""Grid sweep over distillation weight and temperature."""

from __future__ import annotations

import csv
import logging
import multiprocessing as mp
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from threadpoolctl import threadpool_limits

from .config import RunConfig
from .errors import ConfigError
from .trainer import run_experiment

log = logging.getLogger(__name__)

THREADS_ENV = "DYNSDPB_THREADS"
COLUMNS = ("alpha", "tau", "seed", "best_accuracy")


def parse_grid(text: str) -> list:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"bad grid {text!r}: {e}") from None
    if not values:
        raise ConfigError("grid must not be empty")
    return values


def grid_cells(alphas, taus, seeds):
    """Ordered unique ``(alpha, tau, seed)`` cells; duplicates are dropped with a warning."""
    cells, seen = [], set()
    for a in alphas:
        for t in taus:
            for s in seeds:
                cell = (float(a), float(t), int(s))
                if cell in seen:
                    log.warning("duplicate sweep cell alpha=%g tau=%g seed=%d ignored", *cell)
                    continue
                seen.add(cell)
                cells.append(cell)
    return cells


def cell_dir(root: Path, cell) -> Path:
    a, t, s = cell
    return root / f"alpha{a:g}_tau{t:g}_seed{s}"


def _run_cell(args):
    cfg_dict, cell, root = args
    a, t, s = cell
    cfg = RunConfig.from_dict({**cfg_dict, "alpha": a, "tau": t, "seed": s})
    with threadpool_limits(1):
        art = run_experiment(cfg, out_dir=cell_dir(Path(root), cell))
    return cell, art.summary["best_accuracy"]


def default_parallelism() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None


def run_sweep(base: RunConfig, alphas, taus, seeds=None, out_dir=None, parallel=None):
    """Run every grid cell and write ``sweep.csv``; returns the rows in grid order."""
    if not alphas or not taus:
        raise ConfigError("alpha and tau grids must be non-empty")
    seeds = [base.seed] if not seeds else list(seeds)
    root = Path(out_dir if out_dir is not None else base.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    cells = grid_cells(alphas, taus, seeds)
    parallel = default_parallelism() if parallel is None else max(1, int(parallel))
    cfg_dict = base.to_dict()
    jobs = [(cfg_dict, c, str(root)) for c in cells]

    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel, mp_context=mp.get_context("spawn")) as ex:
            results = dict(ex.map(_run_cell, jobs))
    else:
        results = dict(_run_cell(j) for j in jobs)

    rows = [dict(zip(COLUMNS, (*c, results[c]))) for c in cells]
    write_table(root / "sweep.csv", rows)
    return rows


def write_table(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
