"""Solve reports, iteration traces and their export formats."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

__all__ = ["SolveStatus", "IterationRecord", "SolveReport", "write_trace_csv"]


class SolveStatus(str, Enum):
    CONVERGED = "Converged"
    MAX_ITERATIONS = "MaxIterations"
    LINE_SEARCH_FAILURE = "LineSearchFailure"
    NUMERICAL_BREAKDOWN = "NumericalBreakdown"


@dataclass
class IterationRecord:
    """One outer iteration: residual/potential at the incoming iterate,
    then the accepted step data."""

    iteration: int
    gamma_sq: float
    psi: float
    alpha: float
    delta: float
    lsqr_iters: int
    elapsed_s: float
    grad_psi_dot_d: float = np.nan
    psi_after: float = np.nan
    backtracks: int = 0


@dataclass
class SolveReport:
    """Outcome of one solver run."""

    solver: str
    status: SolveStatus
    iterations: int
    x: np.ndarray
    sigma: np.ndarray
    gamma_sq: float
    rmsd: float | None
    wall_time_s: float
    max_h_norm: float
    max_z_norm: float
    trace: list[IterationRecord] = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status is SolveStatus.CONVERGED

    def summary_dict(self) -> dict:
        """JSON-friendly summary (positions are exported separately)."""
        return {
            "solver": self.solver,
            "status": self.status.value,
            "iterations": self.iterations,
            "n": int(self.x.size),
            "m": int(self.sigma.size),
            "gamma_sq": self.gamma_sq,
            "rmsd": self.rmsd,
            "wall_time_s": self.wall_time_s,
            "max_h_norm": self.max_h_norm,
            "max_z_norm": self.max_z_norm,
        }

    def write_json(self, path, extra: dict | None = None) -> None:
        doc = self.summary_dict()
        if extra:
            doc.update(extra)
        Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def write_trace_csv(path, trace: list[IterationRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "gamma_sq", "psi", "alpha", "delta",
                         "lsqr_iters", "elapsed_s"])
        for rec in trace:
            writer.writerow([rec.iteration, repr(rec.gamma_sq), repr(rec.psi),
                             repr(rec.alpha), repr(rec.delta), rec.lsqr_iters,
                             repr(rec.elapsed_s)])
