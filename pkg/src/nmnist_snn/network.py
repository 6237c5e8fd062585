"""Two-layer LIF winner-take-all network.

Input pixels project all-to-all onto ``n_exc`` excitatory neurons. Each
excitatory neuron drives one inhibitory partner, which inhibits every
excitatory neuron except that partner.

One call to :func:`step` advances the network by ``dt`` in this order:

1. decay homeostatic thresholds and all synaptic traces; add this step's
   input spikes and the inhibitory spikes of the previous step
2. integrate excitatory membranes (forward Euler) and emit spikes
3. feed this step's excitatory spikes to the inhibitory layer, integrate it
   and emit inhibitory spikes

An excitatory spike therefore suppresses the rest of the layer from the
next step on.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .aer import NMNIST_SIZE
from .preprocess import SACCADE_MS, Pattern


class NonFiniteState(FloatingPointError):
    """A voltage or trace became NaN or infinite."""


class NoResponseAfterMaxRetries(RuntimeError):
    def __init__(self, message: str, pattern_index: int | None = None):
        super().__init__(message)
        self.pattern_index = pattern_index


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class KernelParams:
    """Synaptic kernel ``(exp(-t/tau_fall) - exp(-t/tau_rise)) * u(t)``.

    ``tau_rise == 0`` drops the rising term, giving a plain exponential that
    starts at 1.
    """

    tau_rise: float
    tau_fall: float
    amplitude: float = 1.0

    def validate(self) -> None:
        if not self.tau_fall > 0:
            raise ConfigError("tau_fall must be > 0")
        if self.tau_rise < 0 or not self.tau_fall > self.tau_rise:
            raise ConfigError("need 0 <= tau_rise < tau_fall")


@dataclass(frozen=True)
class LifParams:
    tau_m: float
    v_rest: float
    v_reset: float
    v_thresh: float
    t_ref: float
    resistance: float = 1.0

    def validate(self) -> None:
        if not self.tau_m > 0:
            raise ConfigError("tau_m must be > 0")
        # the inhibitory defaults reset above rest, so only the threshold is ordered
        if not (self.v_rest < self.v_thresh and self.v_reset < self.v_thresh):
            raise ConfigError("need v_rest < v_thresh and v_reset < v_thresh")
        if self.t_ref < 0:
            raise ConfigError("t_ref must be >= 0")


@dataclass(frozen=True)
class HomeostasisParams:
    delta_theta: float = 0.01  # mV per spike
    tau_theta: float = 1e7  # ms

    def validate(self) -> None:
        if self.delta_theta < 0:
            raise ConfigError("delta_theta must be >= 0")
        if not self.tau_theta > 0:
            raise ConfigError("tau_theta must be > 0")


EXC_DEFAULT = LifParams(tau_m=100.0, v_rest=-65.0, v_reset=-65.0, v_thresh=-52.0, t_ref=5.0)
INH_DEFAULT = LifParams(tau_m=10.0, v_rest=-60.0, v_reset=-45.0, v_thresh=-40.0, t_ref=2.0)


@dataclass(frozen=True)
class NetworkConfig:
    """Static parameters of one network.

    ``w_ei`` and ``w_ie`` are not published values; they are sized so a
    single excitatory spike fires its inhibitory partner within the same
    step and the resulting inhibition silences the rest of the layer.
    """

    n_exc: int = 100
    n_input: int = NMNIST_SIZE * NMNIST_SIZE
    exc: LifParams = EXC_DEFAULT
    inh: LifParams = INH_DEFAULT
    homeostasis: HomeostasisParams = HomeostasisParams()
    kernel_xe: KernelParams = KernelParams(1.0, 5.0)
    kernel_ei: KernelParams = KernelParams(0.0, 1.0)
    kernel_ie: KernelParams = KernelParams(0.0, 2.0)
    w_ei: float = 300.0
    w_ie: float = 1000.0
    w_max: float = 1.0
    w_init_max: float = 0.3  # fraction of w_max
    gain_init: float = 1.0
    gain_step: float = 0.5
    dt: float = 1.0
    max_retries: int = 20
    present_ms: int = SACCADE_MS
    silence_ms: int = 45

    @property
    def n_inh(self) -> int:
        return self.n_exc

    @property
    def n_steps(self) -> int:
        return int(round((self.present_ms + self.silence_ms) / self.dt))

    def validate(self) -> "NetworkConfig":
        if self.n_exc < 1 or self.n_input < 1:
            raise ConfigError("layer sizes must be positive")
        for lif in (self.exc, self.inh):
            lif.validate()
        self.homeostasis.validate()
        for k in (self.kernel_xe, self.kernel_ei, self.kernel_ie):
            k.validate()
        if not self.kernel_xe.tau_rise > 0:
            raise ConfigError("input kernel needs tau_rise > 0")
        if self.kernel_ei.tau_rise != 0 or self.kernel_ie.tau_rise != 0:
            raise ConfigError("inhibitory-pathway kernels have tau_rise = 0")
        if not self.w_max > 0:
            raise ConfigError("w_max must be > 0")
        if not 0 <= self.w_init_max <= 1:
            raise ConfigError("w_init_max is a fraction of w_max in [0, 1]")
        if not self.dt > 0:
            raise ConfigError("dt must be > 0")
        if self.dt >= self.exc.tau_m or self.dt >= self.inh.tau_m:
            raise ConfigError("dt must be smaller than the membrane time constants")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")
        if self.gain_init <= 0 or self.gain_step < 0:
            raise ConfigError("gain_init must be > 0 and gain_step >= 0")
        return self


def kernel_value(t, k: KernelParams):
    """Evaluate the synaptic kernel at time ``t`` (ms); vectorised over ``t``."""
    t = np.asarray(t, dtype=np.float64)
    with np.errstate(over="ignore"):
        tt = np.maximum(t, 0.0)
        value = np.exp(-tt / k.tau_fall)
        if k.tau_rise > 0:
            value = value - np.exp(-tt / k.tau_rise)
    value = np.where(t >= 0, value, 0.0)
    return value if value.ndim else float(value)


class _Trace:
    """Kernel-filtered spike train.

    Single-exponential kernels keep one decaying state ``g``. For the alpha
    kernel ``g`` holds the difference of the fall and rise exponentials
    directly and ``rise`` the rise part, so ``g`` is updated from positive
    terms only and never formed by subtracting two nearly equal numbers:
    ``g <- k_fall*g + (k_fall - k_rise)*rise``, ``rise <- k_rise*rise``, and
    a spike adds to ``rise`` (the kernel is 0 at lag 0).
    """

    __slots__ = ("g", "rise", "k_fall", "k_rise")

    def __init__(self, n: int, kernel: KernelParams, dt: float):
        self.g = np.zeros(n)
        self.rise = np.zeros(n) if kernel.tau_rise > 0 else None
        self.k_fall = math.exp(-dt / kernel.tau_fall)
        self.k_rise = math.exp(-dt / kernel.tau_rise) if kernel.tau_rise > 0 else 0.0

    def decay(self) -> None:
        self.g *= self.k_fall
        if self.rise is not None:
            self.g += (self.k_fall - self.k_rise) * self.rise
            self.rise *= self.k_rise

    def add(self, counts: np.ndarray) -> None:
        if self.rise is None:
            self.g += counts
        else:
            self.rise += counts

    def value(self) -> np.ndarray:
        return self.g

    def clear(self) -> None:
        self.g[:] = 0.0
        if self.rise is not None:
            self.rise[:] = 0.0

    def copy(self) -> "_Trace":
        other = object.__new__(_Trace)
        other.g = self.g.copy()
        other.rise = None if self.rise is None else self.rise.copy()
        other.k_fall, other.k_rise = self.k_fall, self.k_rise
        return other


@dataclass(eq=False)
class NetworkState:
    """Mutable simulation state, including the learned weights and thresholds."""

    cfg: NetworkConfig
    weights: np.ndarray
    theta: np.ndarray
    gain: float
    v_exc: np.ndarray = field(init=False)
    v_inh: np.ndarray = field(init=False)
    ref_exc: np.ndarray = field(init=False)
    ref_inh: np.ndarray = field(init=False)
    g_xe: _Trace = field(init=False)
    g_ei: _Trace = field(init=False)
    g_ie: _Trace = field(init=False)
    inh_spiked: np.ndarray = field(init=False)
    step_index: int = field(init=False, default=0)

    def __post_init__(self):
        cfg = self.cfg
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.weights.shape != (cfg.n_exc, cfg.n_input):
            raise ConfigError(f"weights must have shape {(cfg.n_exc, cfg.n_input)}")
        if self.theta.shape != (cfg.n_exc,):
            raise ConfigError(f"theta must have shape ({cfg.n_exc},)")
        self.g_xe = _Trace(cfg.n_input, cfg.kernel_xe, cfg.dt)
        self.g_ei = _Trace(cfg.n_exc, cfg.kernel_ei, cfg.dt)
        self.g_ie = _Trace(cfg.n_exc, cfg.kernel_ie, cfg.dt)
        self.v_exc = np.empty(cfg.n_exc)
        self.v_inh = np.empty(cfg.n_inh)
        self.ref_exc = np.empty(cfg.n_exc)
        self.ref_inh = np.empty(cfg.n_inh)
        self.inh_spiked = np.zeros(cfg.n_inh, dtype=bool)
        reset_transient(self)

    @classmethod
    def initial(cls, cfg: NetworkConfig, seed: int = 0) -> "NetworkState":
        cfg.validate()
        rng = np.random.default_rng(seed)
        w = rng.uniform(0.0, cfg.w_init_max * cfg.w_max, size=(cfg.n_exc, cfg.n_input))
        return cls(cfg, w, np.zeros(cfg.n_exc), cfg.gain_init)

    def copy(self) -> "NetworkState":
        other = NetworkState(self.cfg, self.weights.copy(), self.theta.copy(), self.gain)
        for name in ("v_exc", "v_inh", "ref_exc", "ref_inh", "inh_spiked"):
            setattr(other, name, getattr(self, name).copy())
        other.g_xe, other.g_ei, other.g_ie = self.g_xe.copy(), self.g_ei.copy(), self.g_ie.copy()
        other.step_index = self.step_index
        return other


def reset_transient(state: NetworkState) -> None:
    """Clear everything except weights, thresholds and the input gain."""
    cfg = state.cfg
    state.v_exc[:] = cfg.exc.v_rest
    state.v_inh[:] = cfg.inh.v_rest
    state.ref_exc[:] = 0.0
    state.ref_inh[:] = 0.0
    state.g_xe.clear()
    state.g_ei.clear()
    state.g_ie.clear()
    state.inh_spiked[:] = False
    state.step_index = 0


def input_current(state: NetworkState) -> np.ndarray:
    """Excitatory current from the input layer, one value per excitatory neuron."""
    return state.gain * state.cfg.kernel_xe.amplitude * (state.weights @ state.g_xe.value())


def _integrate(v, ref, lif: LifParams, current, dt, threshold):
    ref -= dt
    active = ref <= 1e-9
    np.maximum(ref, 0.0, out=ref)
    dv = (dt / lif.tau_m) * (-(v - lif.v_rest) + lif.resistance * current)
    v[:] = np.where(active, v + dv, lif.v_reset)
    spiked = active & (v >= threshold)
    v[spiked] = lif.v_reset
    ref[spiked] = lif.t_ref
    return spiked


def _advance(state: NetworkState, input_counts: np.ndarray, adapt: bool = True):
    cfg = state.cfg
    dt = cfg.dt
    if adapt:
        state.theta *= math.exp(-dt / cfg.homeostasis.tau_theta)

    state.g_xe.decay()
    state.g_xe.add(input_counts)
    state.g_ie.decay()
    state.g_ie.add(state.inh_spiked)
    state.g_ei.decay()

    g_ie = state.g_ie.value()
    inhibition = cfg.kernel_ie.amplitude * cfg.w_ie * (g_ie.sum() - g_ie)
    i_exc = input_current(state) - inhibition
    exc_spiked = _integrate(state.v_exc, state.ref_exc, cfg.exc, i_exc, dt, cfg.exc.v_thresh + state.theta)
    if adapt:
        state.theta[exc_spiked] += cfg.homeostasis.delta_theta

    state.g_ei.add(exc_spiked)
    i_inh = cfg.kernel_ei.amplitude * cfg.w_ei * state.g_ei.value()
    inh_spiked = _integrate(state.v_inh, state.ref_inh, cfg.inh, i_inh, dt, cfg.inh.v_thresh)
    state.inh_spiked = inh_spiked

    state.step_index += 1
    if not (np.isfinite(state.v_exc).all() and np.isfinite(state.v_inh).all()
            and np.isfinite(state.g_xe.g).all()):
        raise NonFiniteState(f"non-finite network state at step {state.step_index}")
    return exc_spiked, inh_spiked


def step(state: NetworkState, input_spikes: Sequence[int] = (), adapt: bool = True):
    """Advance one ``dt``; returns indices of excitatory and inhibitory spikes.

    ``input_spikes`` lists spiking input indices; an index may repeat when a
    pixel emitted several events in the same bin.
    """
    counts = np.bincount(np.asarray(input_spikes, dtype=np.int64), minlength=state.cfg.n_input).astype(np.float64)
    exc, inh = _advance(state, counts, adapt)
    return np.flatnonzero(exc), np.flatnonzero(inh)


class Learner(Protocol):
    """Hooks a plasticity rule uses to observe one presentation."""

    def begin(self, state: NetworkState) -> None: ...

    def after_step(self, state: NetworkState, step_index: int, input_counts: np.ndarray,
                   exc_spiked: np.ndarray) -> None: ...

    def end(self, state: NetworkState, winner: int) -> None: ...


@dataclass
class PresentationResult:
    winner: int
    post_spikes: list[tuple[float, int]]  # (time in ms, excitatory neuron)
    retries: int
    spike_counts: np.ndarray

    @property
    def first_spike_time(self) -> float:
        return self.post_spikes[0][0]


def input_schedule(pattern: Pattern, cfg: NetworkConfig) -> np.ndarray:
    """Per-step input event counts, including the trailing silent period."""
    if pattern.n_pixels != cfg.n_input:
        raise ConfigError(f"pattern has {pattern.n_pixels} pixels, network expects {cfg.n_input}")
    sched = np.zeros((cfg.n_steps, cfg.n_input))
    idx = np.floor(pattern.time / cfg.dt).astype(np.int64)
    np.add.at(sched, (idx, pattern.pixel), 1.0)
    return sched


def present_pattern(
    state: NetworkState,
    pattern: Pattern,
    learner: Learner | None = None,
    adapt: bool = True,
    schedule: np.ndarray | None = None,
) -> PresentationResult:
    """Run one pattern plus the silent tail, raising the input gain until a spike occurs.

    ``adapt=False`` freezes the thresholds (used with ``learner=None`` for
    label assignment and evaluation).
    """
    cfg = state.cfg
    if pattern.duration != cfg.present_ms:
        raise ConfigError(f"pattern lasts {pattern.duration} ms, expected {cfg.present_ms}")
    if schedule is None:
        schedule = input_schedule(pattern, cfg)
    for attempt in range(cfg.max_retries + 1):
        if attempt:
            state.gain += cfg.gain_step
        reset_transient(state)
        if learner is not None:
            learner.begin(state)
        counts = np.zeros(cfg.n_exc, dtype=np.int64)
        spikes: list[tuple[float, int]] = []
        for n in range(cfg.n_steps):
            exc, _ = _advance(state, schedule[n], adapt)
            if exc.any():
                counts += exc
                t = n * cfg.dt
                spikes.extend((t, int(j)) for j in np.flatnonzero(exc))
            if learner is not None:
                learner.after_step(state, n, schedule[n], exc)
        if spikes:
            winner = spikes[0][1]
            if learner is not None:
                learner.end(state, winner)
            reset_transient(state)
            return PresentationResult(winner, spikes, attempt, counts)
    reset_transient(state)
    raise NoResponseAfterMaxRetries(
        f"no excitatory spike after {cfg.max_retries} retries (gain {state.gain:g})"
    )


# --- checkpoint file -------------------------------------------------------

MAGIC = b"SNNW0001"
UNASSIGNED = 0xFFFFFFFF


class CheckpointError(ValueError):
    pass


def encode_checkpoint(weights: np.ndarray, theta: np.ndarray, labels: np.ndarray) -> bytes:
    weights = np.asarray(weights, dtype="<f8")
    n_exc, n_input = weights.shape
    theta = np.asarray(theta, dtype="<f8")
    labels = np.asarray(labels, dtype=np.int64)
    if theta.shape != (n_exc,) or labels.shape != (n_exc,):
        raise CheckpointError("theta/labels length must equal n_exc")
    raw_labels = np.where(labels < 0, UNASSIGNED, labels).astype("<u4")
    return b"".join([
        MAGIC,
        struct.pack("<II", n_exc, n_input),
        np.ascontiguousarray(weights).tobytes(),
        theta.tobytes(),
        raw_labels.tobytes(),
    ])


def decode_checkpoint(data: bytes) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns ``(weights, theta, labels)``; unassigned labels become -1."""
    if data[:8] != MAGIC:
        raise CheckpointError("bad magic")
    n_exc, n_input = struct.unpack_from("<II", data, 8)
    expected = 16 + 8 * n_exc * n_input + 8 * n_exc + 4 * n_exc
    if len(data) != expected:
        raise CheckpointError(f"checkpoint is {len(data)} bytes, expected {expected}")
    off = 16
    weights = np.frombuffer(data, "<f8", n_exc * n_input, off).reshape(n_exc, n_input).astype(np.float64)
    off += 8 * n_exc * n_input
    theta = np.frombuffer(data, "<f8", n_exc, off).astype(np.float64)
    off += 8 * n_exc
    raw = np.frombuffer(data, "<u4", n_exc, off).astype(np.int64)
    labels = np.where(raw == UNASSIGNED, -1, raw)
    return weights, theta, labels


def save_checkpoint(path, weights, theta, labels) -> None:
    Path(path).write_bytes(encode_checkpoint(weights, theta, labels))


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())


def with_overrides(cfg: NetworkConfig, **kwargs) -> NetworkConfig:
    return replace(cfg, **kwargs).validate()
