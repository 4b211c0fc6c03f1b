"""Continual-learning metrics over a stage-by-task success matrix."""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np


class MetricsError(ValueError):
    pass


@dataclass
class TransferMatrix:
    """``r[k, i]``: success rate on task i after training stage k (0-based storage)."""

    r: np.ndarray
    labels: list = field(default_factory=list)
    seeds: list = field(default_factory=list)

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=np.float64)
        if self.r.ndim != 2 or self.r.shape[0] != self.r.shape[1] or self.r.shape[0] < 1:
            raise MetricsError(f"transfer matrix must be square with K >= 1, got {self.r.shape}")
        if ((self.r < 0) | (self.r > 1)).any() or not np.isfinite(self.r).all():
            raise MetricsError("transfer matrix entries must lie in [0, 1]")
        if not self.labels:
            self.labels = [f"task-{i + 1}" for i in range(self.size)]
        if len(self.labels) != self.size:
            raise MetricsError("one label per task required")

    @property
    def size(self) -> int:
        return self.r.shape[0]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage"] + list(self.labels))
        for k, row in enumerate(self.r):
            w.writerow([k + 1] + [f"{x:.6f}" for x in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TransferMatrix":
        rows = list(csv.reader(io.StringIO(text)))
        labels = rows[0][1:]
        return cls(np.array([[float(x) for x in row[1:]] for row in rows[1:]]), labels=labels)


@dataclass
class MetricsReport:
    far: float
    bwt: float | None
    forgetting: float | None
    ft: float | None
    per_task_forgetting: list
    baseline: list
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def compute_metrics(matrix: TransferMatrix | np.ndarray, baselines, provenance: dict | None = None,
                    require_continual: bool = False) -> MetricsReport:
    """FAR, BWT, forgetting and forward transfer.

    With T tasks and 1-based R_{k,i} = r[k-1, i-1]:
      FAR = mean_i R_{T,i}
      BWT = mean_{i<T} (R_{T,i} - R_{i,i})
      F_i = max_{k>=i} R_{k,i} - R_{T,i},  F = mean_{i<T} F_i
      FT  = mean_{i=2..T} (R_{i-1,i} - b_i)
    For T = 1 the continual metrics are ``None`` (or an error with ``require_continual``).
    """
    if not isinstance(matrix, TransferMatrix):
        matrix = TransferMatrix(matrix)
    r = matrix.r
    T = matrix.size
    b = np.asarray(baselines, dtype=np.float64)
    if b.shape != (T,):
        raise MetricsError(f"baseline vector must have length {T}, got {b.shape}")
    last = r[T - 1]
    far = float(last.mean())
    if T == 1:
        if require_continual:
            raise MetricsError("continual metrics need at least two tasks")
        return MetricsReport(far, None, None, None, [0.0], b.tolist(), dict(provenance or {}))
    idx = np.arange(T - 1)  # 0-based i for 1-based i = 1..T-1
    bwt = float((last[idx] - r[idx, idx]).mean())
    # column i's running peak from stage i onward (lower triangle incl. diagonal)
    per_task = np.array([r[i:, i].max() - last[i] for i in range(T)])
    forgetting = float(per_task[idx].mean())
    j = np.arange(1, T)  # 0-based i for 1-based i = 2..T
    ft = float((r[j - 1, j] - b[j]).mean())
    return MetricsReport(far, bwt, forgetting, ft, per_task.tolist(), b.tolist(), dict(provenance or {}))
