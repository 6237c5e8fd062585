"""Weight-update rules: trace STDP, fixed-post-time STDP and PSTH-derived STDP."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np
from scipy.optimize import brentq

from .preprocess import Pattern, PsthTable


class TStarOutOfRange(ValueError):
    pass


class EmptyLog(ValueError):
    pass


class DegeneratePsth(ValueError):
    pass


@dataclass(frozen=True)
class PlasticityParams:
    eta: float = 0.05
    x_tar: float = 0.4
    w_max: float = 1.0
    mu: float = 1.0
    tau_xpre: float = 215.0  # ms
    delta_xpre: float = 1.0

    def validate(self) -> "PlasticityParams":
        if not self.eta > 0:
            raise ValueError("eta must be > 0")
        if not self.w_max > 0:
            raise ValueError("w_max must be > 0")
        if self.mu < 0:
            raise ValueError("mu must be >= 0")
        if not self.tau_xpre > 0:
            raise ValueError("tau_xpre must be > 0")
        return self


@dataclass
class TraceState:
    x_pre: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "TraceState":
        return cls(np.zeros(n))


def _counts(input_spikes, n: int) -> np.ndarray:
    arr = np.asarray(input_spikes)
    if arr.dtype.kind == "f" and arr.shape == (n,):
        return arr
    return np.bincount(arr.astype(np.int64).ravel(), minlength=n).astype(np.float64)


def update_trace(trace: TraceState, dt: float, input_spikes, p: PlasticityParams) -> None:
    """Decay the presynaptic trace over ``dt`` ms, then add one increment per input event.

    ``input_spikes`` is a sequence of input indices (repeats allowed) or a
    float vector of per-input event counts.
    """
    if math.isinf(p.tau_xpre):
        decay = 1.0
    else:
        decay = math.exp(-dt / p.tau_xpre)
    trace.x_pre *= decay
    trace.x_pre += p.delta_xpre * _counts(input_spikes, len(trace.x_pre))


def _soft_bound(w, p: PlasticityParams):
    return np.power(np.maximum(p.w_max - w, 0.0), p.mu)


def stdp_update(w, x_pre, p: PlasticityParams):
    """``w + eta * (x_pre - x_tar) * (w_max - w)**mu``, clipped to ``[0, w_max]``."""
    dw = p.eta * (np.asarray(x_pre) - p.x_tar) * _soft_bound(w, p)
    return np.clip(w + dw, 0.0, p.w_max)


def fixed_post_update(w_row, trace_at_tstar: TraceState, p: PlasticityParams):
    return stdp_update(w_row, trace_at_tstar.x_pre, p)


def psth_update(w, x_pre, p: PlasticityParams):
    dw = p.eta * np.asarray(x_pre) * _soft_bound(w, p)
    return np.clip(w + dw, 0.0, p.w_max)


def psth_xpre(pattern: Pattern, h: np.ndarray, x_tar: float) -> np.ndarray:
    """Per-pixel sum of ``h`` over the pixel's spike times; silent pixels get ``-x_tar``."""
    h = np.asarray(h, dtype=np.float64)
    if len(h) != pattern.duration:
        raise ValueError(f"h has {len(h)} bins, pattern lasts {pattern.duration} ms")
    summed = np.bincount(pattern.pixel, weights=h[pattern.time], minlength=pattern.n_pixels)
    spiked = np.bincount(pattern.pixel, minlength=pattern.n_pixels) > 0
    return np.where(spiked, summed, -x_tar)


def estimate_tstar(first_spike_times: Iterable[float]) -> int:
    times = np.asarray(list(first_spike_times), dtype=np.float64)
    if times.size == 0:
        raise EmptyLog("no postsynaptic spike times recorded")
    return int(math.floor(times.mean() + 0.5))


# --- PSTH-derived rule calibration ---------------------------------------------


@dataclass
class Calibration:
    a: float
    b: float
    h: np.ndarray
    psth_mean_abs_dw: float
    reference_mean_abs_dw: float
    rho: float

    @property
    def ratio(self) -> float:
        return self.psth_mean_abs_dw / self.reference_mean_abs_dw

    def report_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["a", "b", "rho", "psth_mean_abs_dw", "reference_mean_abs_dw", "ratio"])
        writer.writerow([repr(float(v)) for v in (self.a, self.b, self.rho, self.psth_mean_abs_dw,
                                                  self.reference_mean_abs_dw, self.ratio)])
        return buf.getvalue()


def trace_at(pattern: Pattern, t_ms: float, p: PlasticityParams, dt: float = 1.0) -> np.ndarray:
    """Presynaptic trace of every pixel at ``t_ms``, spikes at ``t <= t_ms`` included."""
    n_steps = int(math.floor(t_ms / dt))
    keep = np.floor(pattern.time / dt) <= n_steps
    lag = (n_steps - np.floor(pattern.time[keep] / dt)) * dt
    contrib = p.delta_xpre * np.exp(-lag / p.tau_xpre)
    return np.bincount(pattern.pixel[keep], weights=contrib, minlength=pattern.n_pixels)


def reference_mean_abs_dw(patterns: Sequence[Pattern], w: np.ndarray, p: PlasticityParams,
                          post_time: float | None = None) -> float:
    """Mean |dw| of the trace rule with the post spike at ``post_time`` (default: last bin)."""
    total = 0.0
    n = 0
    for pat in patterns:
        t = pat.duration - 1 if post_time is None else post_time
        x = trace_at(pat, t, p)
        dw = p.eta * (x - p.x_tar) * _soft_bound(w, p)
        total += np.abs(dw).sum()
        n += dw.size
    return total / n


def _bias_for_area_margin(H: np.ndarray, rho: float) -> float:
    """Offset c with sum(H + c) = -rho * sum(|H + c|)."""
    f = lambda c: float(np.sum(H + c) + rho * np.sum(np.abs(H + c)))
    lo, hi = -float(H.max()), -float(H.min())
    return brentq(f, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=500)


def calibrate_psth_stdp(
    H: PsthTable | np.ndarray,
    patterns: Sequence[Pattern],
    reference: float,
    w: np.ndarray,
    p: PlasticityParams,
    rho: float = 0.1,
) -> Calibration:
    """Fit ``h = a*H + b`` for the PSTH rule.

    ``b/a`` is chosen so the depression area exceeds the potentiation area,
    ``sum(h) = -rho * sum(|h|)``. ``a`` is then set so the mean |dw| of the
    PSTH rule on ``patterns`` at weights ``w`` equals ``reference`` (the trace
    rule's mean |dw| on the same patterns). A flat ``H`` has no potentiation
    region; it gets ``a = 0`` and a negative constant ``b``.
    """
    values = np.asarray(H.values if isinstance(H, PsthTable) else H, dtype=np.float64)
    if not np.isfinite(values).all() or values.max(initial=0.0) <= 0 or values.min() < 0:
        raise DegeneratePsth("PSTH must be finite, non-negative and not all zero")
    if not 0 < rho < 1:
        raise ValueError("rho must be in (0, 1)")
    if not patterns:
        raise ValueError("calibration needs at least one pattern")

    bound = _soft_bound(w, p)
    spiked_terms = []  # |eta * S * bound| per spiking pixel, with S the sum of (H + c) or 1
    silent_total = 0.0
    n_terms = 0
    flat = values.max() == values.min()
    peak = float(values.max())
    unit = values / peak  # fit on a unit-peak copy so tiny PSTHs do not underflow
    c = 0.0 if flat else _bias_for_area_margin(unit, rho)
    shape = -np.ones_like(unit) if flat else unit + c

    lin = 0.0
    for pat in patterns:
        x_unit = psth_xpre(pat, shape, x_tar=0.0)
        spiked = pat.counts() > 0
        lin += np.abs(p.eta * x_unit[spiked] * bound[spiked]).sum()
        silent_total += np.abs(p.eta * p.x_tar * bound[~spiked]).sum()
        n_terms += pat.n_pixels
    lin /= n_terms
    silent_mean = silent_total / n_terms
    if lin <= 0:
        raise DegeneratePsth("patterns contain no spikes to calibrate against")
    scale = (reference - silent_mean) / lin
    if scale <= 0:
        raise DegeneratePsth(
            "depression of silent pixels alone already exceeds the reference update size"
        )
    if flat:
        a, b = 0.0, -scale
    else:
        a, b = scale / peak, scale * c
    if not (np.isfinite(a) and np.isfinite(b)):
        raise DegeneratePsth("PSTH range too small to calibrate")
    h = scale * shape
    achieved = silent_mean + scale * lin
    return Calibration(a, b, h, achieved, reference, rho)


def h_to_csv(h: np.ndarray) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["t_ms", "h"])
    for t, v in enumerate(h):
        writer.writerow([t, repr(float(v))])
    return buf.getvalue()


def h_from_csv(text: str) -> np.ndarray:
    rows = sorted(csv.DictReader(io.StringIO(text)), key=lambda r: int(r["t_ms"]))
    return np.array([float(r["h"]) for r in rows])


# --- plasticity modes and their learners ----------------------------------------


@dataclass(frozen=True)
class TraceStdp:
    """Update each spiking excitatory neuron with its presynaptic traces at the spike."""

    params: PlasticityParams = PlasticityParams()

    def learner(self, n_input: int, dt: float) -> "_TraceLearner":
        return _TraceLearner(self.params, n_input, dt)


@dataclass(frozen=True)
class FixedPost:
    """Update the winner with traces sampled at ``t_star`` instead of its spike time."""

    t_star: float
    params: PlasticityParams = PlasticityParams()
    duration: int = 105

    def __post_init__(self):
        if not 0 <= self.t_star < self.duration:
            raise TStarOutOfRange(f"t_star={self.t_star} outside [0, {self.duration})")

    def learner(self, n_input: int, dt: float) -> "_FixedPostLearner":
        return _FixedPostLearner(self, n_input, dt)


@dataclass(frozen=True)
class PsthStdp:
    """Update the winner at the end of the pattern with ``x_pre = sum h(t_i)``."""

    h: np.ndarray = field(compare=False)
    a: float = 1.0
    b: float = 0.0
    params: PlasticityParams = PlasticityParams()

    def __post_init__(self):
        if len(self.h) != 105:
            raise ValueError("h table must have 105 entries")

    def learner(self, n_input: int, dt: float) -> "_PsthLearner":
        return _PsthLearner(self, n_input, dt)


PlasticityMode = Union[TraceStdp, FixedPost, PsthStdp]


class _TraceLearner:
    def __init__(self, p: PlasticityParams, n_input: int, dt: float):
        self.p = p
        self.dt = dt
        self.trace = TraceState.zeros(n_input)

    def begin(self, state) -> None:
        self.trace.x_pre[:] = 0.0

    def after_step(self, state, step_index, input_counts, exc_spiked) -> None:
        update_trace(self.trace, self.dt, input_counts, self.p)
        if exc_spiked.any():
            for j in np.flatnonzero(exc_spiked):
                state.weights[j] = stdp_update(state.weights[j], self.trace.x_pre, self.p)

    def end(self, state, winner) -> None:
        pass


class _FixedPostLearner(_TraceLearner):
    def __init__(self, mode: FixedPost, n_input: int, dt: float):
        super().__init__(mode.params, n_input, dt)
        self.sample_step = int(math.floor(mode.t_star / dt))
        self.sampled = TraceState.zeros(n_input)

    def after_step(self, state, step_index, input_counts, exc_spiked) -> None:
        update_trace(self.trace, self.dt, input_counts, self.p)
        if step_index == self.sample_step:
            self.sampled.x_pre[:] = self.trace.x_pre

    def end(self, state, winner) -> None:
        state.weights[winner] = fixed_post_update(state.weights[winner], self.sampled, self.p)


class _PsthLearner:
    def __init__(self, mode: PsthStdp, n_input: int, dt: float):
        self.mode = mode
        self.dt = dt
        self.h = np.asarray(mode.h, dtype=np.float64)
        self.summed = np.zeros(n_input)
        self.spiked = np.zeros(n_input, dtype=bool)

    def begin(self, state) -> None:
        self.summed[:] = 0.0
        self.spiked[:] = False

    def after_step(self, state, step_index, input_counts, exc_spiked) -> None:
        t = int(math.floor(step_index * self.dt))
        if t < len(self.h):
            active = input_counts > 0
            if active.any():
                self.summed += input_counts * self.h[t]
                self.spiked |= active

    def end(self, state, winner) -> None:
        p = self.mode.params
        x_pre = np.where(self.spiked, self.summed, -p.x_tar)
        state.weights[winner] = psth_update(state.weights[winner], x_pre, p)
