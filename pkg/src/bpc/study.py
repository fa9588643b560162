"""Monte Carlo coverage study for Wald and bootstrap intervals.

Replication ``r`` of cell (choice label ``c``, sample size ``n``) draws all
of its randomness from ``make_rng(master_seed, c, n, r)``, so results do not depend
on which worker ran it or in which order.
"""

from __future__ import annotations

import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from bpc.mle import (
    BootstrapError,
    DegenerateDataError,
    MleControl,
    bootstrap_ci,
    mle_fixed_point,
    sufficient_stats,
)
from bpc.sampling import SampleConfig, make_rng, sample_exact
from bpc.series import LambdaParams, SeriesError

# parameter choices and starting values of the simulation design
DESIGN_CHOICES = {
    1: LambdaParams(2.0, 2.5, 0.35),
    2: LambdaParams(1.75, 3.25, 0.45),
    3: LambdaParams(2.5, 1.5, 0.55),
    4: LambdaParams(3.5, 4.0, 0.75),
}
DESIGN_INITS = {
    1: LambdaParams(1.04, 1.23, 0.125),
    2: LambdaParams(0.98, 1.46, 0.27),
    3: LambdaParams(1.12, 1.03, 0.28),
    4: LambdaParams(1.74, 2.23, 0.18),
}

MAX_FAILURE_FRACTION = 0.10


@dataclass(frozen=True)
class StudyConfig:
    parameter_choices: tuple
    sample_sizes: tuple = (50, 75, 100)
    replications: int = 500
    tau: float = 0.05
    bootstrap_B: int = 200
    master_seed: int = 0
    inits: Optional[tuple] = None
    epsilon: float = 1e-6
    max_iter: int = 10_000
    labels: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "parameter_choices", tuple(self.parameter_choices))
        object.__setattr__(self, "sample_sizes", tuple(int(n) for n in self.sample_sizes))
        if self.inits is not None:
            object.__setattr__(self, "inits", tuple(self.inits))
            if len(self.inits) != len(self.parameter_choices):
                raise ValueError("inits must match parameter_choices in length")
        if self.labels is not None:
            object.__setattr__(self, "labels", tuple(int(c) for c in self.labels))
            if len(self.labels) != len(self.parameter_choices):
                raise ValueError("labels must match parameter_choices in length")
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        if any(n < 2 for n in self.sample_sizes):
            raise ValueError("every sample size must be at least 2")
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        if self.bootstrap_B and self.bootstrap_B < 50:
            raise ValueError("bootstrap_B must be 0 (off) or at least 50")


@dataclass
class CellResult:
    choice: int
    n: int
    truth: list
    replications: int
    failures: int
    wald_cp: list
    wald_aw: list
    negative_variance_pct: float
    boot_cp: Optional[list]
    boot_aw: Optional[list]
    bias: list
    mse: list
    mean_iterations: float
    boundary_pct: float


@dataclass
class StudyResult:
    cells: list = field(default_factory=list)

    @property
    def failure_fraction(self) -> float:
        total = sum(c.replications for c in self.cells)
        return sum(c.failures for c in self.cells) / total if total else 0.0

    def to_dict(self) -> dict:
        return {"cells": [asdict(c) for c in self.cells],
                "failure_fraction": self.failure_fraction}


def _replicate(task):
    """One sample -> fit -> intervals replication; returns a plain record."""
    seed, choice, n, r, truth, init, tau, B, eps, max_iter = task
    rng = make_rng(seed, choice, n, r)
    truth = LambdaParams(*truth)
    stats = sufficient_stats(sample_exact(truth, SampleConfig(n=n), rng=rng))
    control = MleControl(init=LambdaParams(*init) if init else None, epsilon=eps, max_iter=max_iter)
    try:
        fit = mle_fixed_point(stats, control, tau=tau)
    except (DegenerateDataError, SeriesError) as exc:
        return {"ok": False, "reason": type(exc).__name__}
    if not fit.converged:
        return {"ok": False, "reason": "no convergence"}
    rec = {
        "ok": True,
        "estimate": fit.estimate.as_array().tolist(),
        "negative": fit.negative_variance_flag,
        "wald": None if fit.wald_intervals is None else fit.wald_intervals.tolist(),
        "iterations": fit.iterations,
        "boundary": fit.boundary_active,
        "boot": None,
    }
    if B:
        try:
            boot = bootstrap_ci(fit.estimate, n, B=B, tau=tau, rng=rng, control=control)
            rec["boot"] = boot.intervals.tolist()
        except (BootstrapError, SeriesError):
            rec["boot_failed"] = True
    return rec


def _covers(intervals: np.ndarray, truth: np.ndarray) -> np.ndarray:
    return (intervals[:, :, 0] <= truth) & (truth <= intervals[:, :, 1])


def _summarize(choice: int, n: int, truth: LambdaParams, records: list) -> CellResult:
    t = truth.as_array()
    ok = [r for r in records if r["ok"]]
    failures = len(records) - len(ok)
    est = np.array([r["estimate"] for r in ok]).reshape(-1, 3)
    wald = np.array([r["wald"] for r in ok if r["wald"] is not None]).reshape(-1, 3, 2)
    boots = [r["boot"] for r in ok if r.get("boot") is not None]
    failures += sum(1 for r in ok if r.get("boot_failed"))
    nan3 = [float("nan")] * 3
    boot_cp = boot_aw = None
    if boots:
        boot = np.array(boots).reshape(-1, 3, 2)
        boot_cp = _covers(boot, t).mean(axis=0).tolist()
        boot_aw = (boot[:, :, 1] - boot[:, :, 0]).mean(axis=0).tolist()
    return CellResult(
        choice=choice,
        n=n,
        truth=t.tolist(),
        replications=len(records),
        failures=failures,
        wald_cp=_covers(wald, t).mean(axis=0).tolist() if len(wald) else nan3,
        wald_aw=(wald[:, :, 1] - wald[:, :, 0]).mean(axis=0).tolist() if len(wald) else nan3,
        negative_variance_pct=100.0 * sum(r["negative"] for r in ok) / len(ok) if ok else 0.0,
        boot_cp=boot_cp,
        boot_aw=boot_aw,
        bias=(est.mean(axis=0) - t).tolist() if len(est) else nan3,
        mse=((est - t) ** 2).mean(axis=0).tolist() if len(est) else nan3,
        mean_iterations=float(np.mean([r["iterations"] for r in ok])) if ok else 0.0,
        boundary_pct=100.0 * sum(r["boundary"] for r in ok) / len(ok) if ok else 0.0,
    )


def default_workers() -> int:
    env = os.environ.get("BPC_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def run_study(config: StudyConfig, workers: Optional[int] = None,
              progress: bool = False) -> StudyResult:
    workers = default_workers() if workers is None else max(1, workers)
    result = StudyResult()
    for ci, truth in enumerate(config.parameter_choices):
        choice = config.labels[ci] if config.labels else ci + 1
        init = config.inits[ci] if config.inits else None
        for n in config.sample_sizes:
            tasks = [(config.master_seed, choice, n, r, truth.as_array().tolist(),
                      init.as_array().tolist() if init else None, config.tau,
                      config.bootstrap_B, config.epsilon, config.max_iter)
                     for r in range(config.replications)]
            if workers == 1:
                records = [_replicate(t) for t in tasks]
            else:
                with ProcessPoolExecutor(max_workers=workers) as pool:
                    records = list(pool.map(_replicate, tasks, chunksize=8))
            cell = _summarize(choice, n, truth, records)
            result.cells.append(cell)
            if progress:
                print(f"choice {choice} n={n}: wald CP {np.round(cell.wald_cp, 3).tolist()}",
                      file=sys.stderr)
    return result


def _fmt(v, width=7, digits=3):
    if v is None or v != v:
        return "-".rjust(width)
    return f"{v:{width}.{digits}f}"


def render_table(result: StudyResult) -> str:
    """Text table: Wald CP/AW block, % negative variances, bootstrap CP/AW block."""
    head1 = (f"{'':>8} {'':>4} | {'Asymptotic (inverse observed information)':^54} | "
             f"{'Bootstrap':^44}")
    cols = []
    for i in (1, 2, 3):
        cols += [f"CP{i}", f"AW{i}"]
    head2 = (f"{'choice':>8} {'n':>4} | " + " ".join(c.rjust(7) for c in cols)
             + f" {'%neg':>7}".rjust(11) + " | " + " ".join(c.rjust(7) for c in cols))
    lines = [head1, head2, "-" * len(head2)]
    last = None
    for c in result.cells:
        label = f"Choice {c.choice}" if c.choice != last else ""
        last = c.choice
        wald = " ".join(_fmt(v) for pair in zip(c.wald_cp, c.wald_aw) for v in pair)
        if c.boot_cp is None:
            boot = " ".join("-".rjust(7) for _ in range(6))
        else:
            boot = " ".join(_fmt(v) for pair in zip(c.boot_cp, c.boot_aw) for v in pair)
        lines.append(f"{label:>8} {c.n:>4} | {wald} {_fmt(c.negative_variance_pct, 10, 2)} | {boot}")
    return "\n".join(lines)
