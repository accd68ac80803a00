"""Per-iteration metrics records and their on-disk formats.

``metrics.jsonl`` holds one JSON object per line, one line per training
iteration, in iteration order:

=================  =========================================================
schema_version     int, currently 1
iteration          global iteration index, 0-based, strictly increasing
epoch              0-based epoch index
ce_loss            batch-mean cross-entropy
lmbc_loss          mean temperature-scaled KL over distilled samples, or null
total_loss         value that was differentiated
u_over_U           mean normalized uncertainty over distilled samples, or null
d                  mean discrimination capability, or null
alpha_eff          mean effective distillation weight, or null
tau_eff            mean effective temperature, or null
lmbc_samples       number of samples that contributed a consistency term
skipped_empty      carried samples skipped because a generation was empty
lr                 learning rate used for this update
grad_norms         {layer: L2 norm} on sampled iterations, else null
eval_accuracy      held-out accuracy after the epoch's last iteration, else null
eval_loss          held-out mean loss alongside ``eval_accuracy``, else null
=================  =========================================================

``gradnorms.csv`` has an ``iteration`` column followed by one column per
tracked layer, one row per sampled iteration.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields
from typing import Optional

SCHEMA_VERSION = 1


@dataclass
class MetricsRecord:
    iteration: int
    epoch: int
    ce_loss: float
    total_loss: float
    lmbc_loss: Optional[float] = None
    u_over_U: Optional[float] = None
    d: Optional[float] = None
    alpha_eff: Optional[float] = None
    tau_eff: Optional[float] = None
    lmbc_samples: int = 0
    skipped_empty: int = 0
    lr: float = 0.0
    grad_norms: Optional[dict] = None
    eval_accuracy: Optional[float] = None
    eval_loss: Optional[float] = None

    def check_finite(self):
        for f in fields(self):
            v = getattr(self, f.name)
            vals = v.values() if isinstance(v, dict) else [v]
            for x in vals:
                if isinstance(x, float) and not math.isfinite(x):
                    raise ValueError(f"non-finite {f.name} at iteration {self.iteration}: {x}")
        return self

    def to_json(self) -> str:
        return json.dumps({"schema_version": SCHEMA_VERSION, **asdict(self)})

    @classmethod
    def from_json(cls, line: str) -> "MetricsRecord":
        raw = json.loads(line)
        version = raw.pop("schema_version", None)
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported metrics schema version {version}")
        return cls(**raw)


class MetricsWriter:
    """Appends records to ``metrics.jsonl``, flushing after each line."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "w", encoding="utf-8")
        self._last = None

    def write(self, record: MetricsRecord):
        record.check_finite()
        if self._last is not None and record.iteration <= self._last:
            raise ValueError("metrics records must be strictly ordered by iteration")
        self._last = record.iteration
        self._fh.write(record.to_json() + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [MetricsRecord.from_json(line) for line in fh if line.strip()]


def write_gradnorms(path, layers, rows):
    """``rows`` is a list of ``(iteration, {layer: norm})``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", *layers])
        for it, norms in rows:
            w.writerow([it, *(repr(float(norms[layer])) for layer in layers)])


def read_gradnorms(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [(int(r[0]), {k: float(v) for k, v in zip(header[1:], r[1:])}) for r in reader]
    return header[1:], rows
