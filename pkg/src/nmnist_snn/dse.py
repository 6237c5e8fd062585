"""Grid search over (tau_xpre, eta, delta_theta) with deterministic per-cell seeds."""

from __future__ import annotations

import csv
import io
import itertools
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import RunConfig
from .plasticity import TraceStdp
from .preprocess import Pattern
from .trainer import assign_labels, evaluate, train

log = logging.getLogger(__name__)

CSV_HEADER = ["tau_xpre_ms", "eta", "delta_theta_mV", "accuracy", "unresponsive", "seconds"]


@dataclass(frozen=True)
class DseGrid:
    tau_xpre_values: tuple[float, ...]
    eta_values: tuple[float, ...]
    delta_theta_values: tuple[float, ...]
    base: RunConfig = field(default_factory=RunConfig)

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "DseGrid":
        return cls(tuple(cfg.tau_xpre_values), tuple(cfg.eta_values),
                   tuple(cfg.delta_theta_values), cfg).validate()

    def validate(self) -> "DseGrid":
        for name in ("tau_xpre_values", "eta_values", "delta_theta_values"):
            values = getattr(self, name)
            if not values or min(values) <= 0:
                raise ValueError(f"{name} must be a non-empty list of positive values")
        return self

    def cells(self) -> list[tuple[float, float, float]]:
        return list(itertools.product(self.tau_xpre_values, self.eta_values, self.delta_theta_values))


@dataclass
class DseCell:
    tau_xpre: float
    eta: float
    delta_theta: float
    accuracy: float = math.nan
    unresponsive: int = -1
    seconds: float = 0.0
    error: str | None = None

    @property
    def params(self) -> tuple[float, float, float]:
        return (self.tau_xpre, self.eta, self.delta_theta)

    @property
    def ok(self) -> bool:
        return self.error is None and not math.isnan(self.accuracy)


@dataclass
class DseResult:
    cells: list[DseCell]

    @property
    def best(self) -> DseCell | None:
        """Highest accuracy; ties go to smaller tau_xpre, then eta, then delta_theta."""
        done = [c for c in self.cells if c.ok]
        if not done:
            return None
        return min(done, key=lambda c: (-c.accuracy, c.tau_xpre, c.eta, c.delta_theta))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for c in self.cells:
            writer.writerow([repr(c.tau_xpre), repr(c.eta), repr(c.delta_theta),
                             repr(c.accuracy), c.unresponsive, f"{c.seconds:.3f}"])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "DseResult":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != CSV_HEADER:
            raise ValueError("not a DSE results table")
        cells = []
        for r in rows[1:]:
            if not r:
                continue
            acc = float(r[3])
            cells.append(DseCell(float(r[0]), float(r[1]), float(r[2]), acc, int(r[4]), float(r[5]),
                                 None if not math.isnan(acc) else "failed"))
        return cls(cells)


def cell_seed(seed: int, index: int) -> int:
    """Independent seed for grid cell ``index``, derived from the master seed."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint32)[0])


def run_cell(base: RunConfig, params: tuple[float, float, float], seed: int,
             train_patterns: Sequence[Pattern], test_patterns: Sequence[Pattern]) -> DseCell:
    tau, eta, dth = params
    cell = DseCell(tau, eta, dth)
    start = time.perf_counter()
    try:
        cfg = base.replace(tau_xpre=tau, eta=eta, delta_theta=dth).validate()
        shuffle = cfg.shuffle_seed if cfg.shuffle_seed >= 0 else None
        model = train(cfg.network_config(), TraceStdp(cfg.plasticity_params()), train_patterns,
                      cfg.epochs, seed=seed, shuffle_seed=shuffle)
        model = assign_labels(model, train_patterns)
        report = evaluate(model, test_patterns)
        cell.accuracy = report.accuracy
        cell.unresponsive = report.unresponsive
    except Exception as exc:  # a failed cell must not stop the grid
        log.warning("cell %s failed: %s", params, exc)
        cell.error = f"{type(exc).__name__}: {exc}"
    cell.seconds = time.perf_counter() - start
    return cell


_shared: dict = {}


def _init_worker(base, train_patterns, test_patterns) -> None:
    _shared.update(base=base, train=train_patterns, test=test_patterns)


def _run_indexed(job):
    params, seed = job
    return run_cell(_shared["base"], params, seed, _shared["train"], _shared["test"])


def run_cells(base: RunConfig, cells: Sequence[tuple[float, float, float]],
              train_patterns: Sequence[Pattern], test_patterns: Sequence[Pattern],
              workers: int = 1, seed_offset: int = 0) -> DseResult:
    jobs = [(params, cell_seed(base.seed, seed_offset + i)) for i, params in enumerate(cells)]
    if workers <= 1 or len(jobs) <= 1:
        out = [run_cell(base, p, s, train_patterns, test_patterns) for p, s in jobs]
    else:
        with ProcessPoolExecutor(workers, initializer=_init_worker,
                                 initargs=(base, list(train_patterns), list(test_patterns))) as pool:
            out = list(pool.map(_run_indexed, jobs))
    for c in out:
        log.info("cell tau=%g eta=%g dtheta=%g -> %s", c.tau_xpre, c.eta, c.delta_theta,
                 c.error or f"{c.accuracy:.4f}")
    return DseResult(out)


def run_grid(grid: DseGrid, train_patterns: Sequence[Pattern], test_patterns: Sequence[Pattern],
             workers: int = 1) -> DseResult:
    """Train, label and evaluate one network per cell.

    Cell ``i`` (in tau, eta, delta_theta lexicographic order) is seeded from
    ``(grid.base.seed, i)``, so results do not depend on the worker count.
    """
    grid.validate()
    if not len(train_patterns) or not len(test_patterns):
        raise ValueError("grid search needs training and test patterns")
    return run_cells(grid.base, grid.cells(), train_patterns, test_patterns, workers)


def linear_values(centre: float, half_width: float, n: int) -> tuple[float, ...]:
    """``n`` evenly spaced positive values over ``centre +- half_width``."""
    if half_width == 0 or n <= 1:
        return (centre,)
    values = np.linspace(centre - half_width, centre + half_width, n)
    return tuple(float(v) for v in values if v > 0)


def refine_linear(result: DseResult, spans: dict[str, tuple[float, int]], base: RunConfig,
                  train_patterns: Sequence[Pattern], test_patterns: Sequence[Pattern],
                  workers: int = 1) -> DseResult:
    """Sweep eta and delta_theta linearly around the best cell with tau_xpre fixed.

    ``spans`` maps ``"eta"`` and ``"delta_theta"`` to ``(half_width, n)``;
    a missing entry or a zero half width keeps the best value.
    """
    best = result.best
    if best is None:
        raise ValueError("no successful cell to refine around")
    etas = linear_values(best.eta, *spans.get("eta", (0.0, 1)))
    dths = linear_values(best.delta_theta, *spans.get("delta_theta", (0.0, 1)))
    grid = DseGrid((best.tau_xpre,), etas, dths, base).validate()
    # refinement cells get seeds disjoint from the first grid's
    return run_cells(base, grid.cells(), train_patterns, test_patterns, workers,
                     seed_offset=len(result.cells))


def parse_spans(text: str) -> dict[str, tuple[float, int]]:
    """``"eta=0.02:5,delta_theta=0.05:5"`` -> ``{"eta": (0.02, 5), ...}``."""
    spans: dict[str, tuple[float, int]] = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        key, _, value = part.partition("=")
        if key not in ("eta", "delta_theta") or ":" not in value:
            raise ValueError(f"bad span {part!r}; expected eta=HALF_WIDTH:N or delta_theta=HALF_WIDTH:N")
        hw, n = value.split(":", 1)
        spans[key] = (float(hw), int(n))
    return spans
