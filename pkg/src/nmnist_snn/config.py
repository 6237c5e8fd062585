"""Flat ``key=value`` run configuration.

One setting per line, ``#`` starts a comment. Lists are comma separated.
Unknown keys and invalid values are rejected before any computation starts.
"""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, fields
from pathlib import Path

from .network import HomeostasisParams, KernelParams, LifParams, NetworkConfig
from .plasticity import PlasticityParams


class ConfigKeyError(KeyError):
    pass


class ConfigValueError(ValueError):
    pass


@dataclass
class RunConfig:
    # network size and integration
    n_exc: int = 100
    n_input: int = 34 * 34
    dt: float = 1.0
    max_retries: int = 20
    gain_init: float = 1.0
    gain_step: float = 0.5
    w_max: float = 1.0
    w_init_max: float = 0.3
    w_ei: float = 300.0
    w_ie: float = 1000.0
    present_ms: int = 105
    silence_ms: int = 45
    # excitatory layer
    exc_tau_m: float = 100.0
    exc_v_rest: float = -65.0
    exc_v_reset: float = -65.0
    exc_v_thresh: float = -52.0
    exc_t_ref: float = 5.0
    exc_resistance: float = 1.0
    # inhibitory layer
    inh_tau_m: float = 10.0
    inh_v_rest: float = -60.0
    inh_v_reset: float = -45.0
    inh_v_thresh: float = -40.0
    inh_t_ref: float = 2.0
    inh_resistance: float = 1.0
    # homeostasis
    delta_theta: float = 0.01
    tau_theta: float = 1e7
    # synaptic kernels
    xe_tau_rise: float = 1.0
    xe_tau_fall: float = 5.0
    xe_amplitude: float = 1.0
    ei_tau_fall: float = 1.0
    ei_amplitude: float = 1.0
    ie_tau_fall: float = 2.0
    ie_amplitude: float = 1.0
    # plasticity
    eta: float = 0.05
    x_tar: float = 0.4
    mu: float = 1.0
    tau_xpre: float = 215.0
    delta_xpre: float = 1.0
    t_star: float = -1.0  # < 0: estimate from a trace-STDP run
    rho: float = 0.1
    calib_patterns: int = 100
    # run
    seed: int = 0
    epochs: int = 1
    saccade: int = 1
    polarity: str = "ON"
    data_root: str = ""
    n_train: int = 0  # 0 = all
    n_test: int = 0
    shuffle_seed: int = -1  # < 0: fixed dataset order
    workers: int = 1
    # design-space grid
    tau_xpre_values: tuple[float, ...] = (20.0, 44.15, 97.5, 215.0)
    eta_values: tuple[float, ...] = (0.0005, 0.005, 0.05, 0.5)
    delta_theta_values: tuple[float, ...] = (0.001, 0.01, 0.1)

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(
            n_exc=self.n_exc,
            n_input=self.n_input,
            exc=LifParams(self.exc_tau_m, self.exc_v_rest, self.exc_v_reset,
                          self.exc_v_thresh, self.exc_t_ref, self.exc_resistance),
            inh=LifParams(self.inh_tau_m, self.inh_v_rest, self.inh_v_reset,
                          self.inh_v_thresh, self.inh_t_ref, self.inh_resistance),
            homeostasis=HomeostasisParams(self.delta_theta, self.tau_theta),
            kernel_xe=KernelParams(self.xe_tau_rise, self.xe_tau_fall, self.xe_amplitude),
            kernel_ei=KernelParams(0.0, self.ei_tau_fall, self.ei_amplitude),
            kernel_ie=KernelParams(0.0, self.ie_tau_fall, self.ie_amplitude),
            w_ei=self.w_ei,
            w_ie=self.w_ie,
            w_max=self.w_max,
            w_init_max=self.w_init_max,
            gain_init=self.gain_init,
            gain_step=self.gain_step,
            dt=self.dt,
            max_retries=self.max_retries,
            present_ms=self.present_ms,
            silence_ms=self.silence_ms,
        ).validate()

    def plasticity_params(self) -> PlasticityParams:
        return PlasticityParams(self.eta, self.x_tar, self.w_max, self.mu,
                                self.tau_xpre, self.delta_xpre).validate()

    def validate(self) -> "RunConfig":
        try:
            self.network_config()
            self.plasticity_params()
        except ValueError as exc:
            raise ConfigValueError(str(exc)) from exc
        if self.saccade not in (1, 2, 3):
            raise ConfigValueError("saccade must be 1, 2 or 3")
        if self.polarity.upper() not in ("ON", "OFF"):
            raise ConfigValueError("polarity must be ON or OFF")
        if self.epochs < 0 or self.n_train < 0 or self.n_test < 0 or self.workers < 1:
            raise ConfigValueError("epochs/n_train/n_test must be >= 0 and workers >= 1")
        if not 0 < self.rho < 1:
            raise ConfigValueError("rho must be in (0, 1)")
        for name in ("tau_xpre_values", "eta_values", "delta_theta_values"):
            values = getattr(self, name)
            if not values or min(values) <= 0:
                raise ConfigValueError(f"{name} must be a non-empty list of positive values")
        return self

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # --- text form -----------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(repr(v) for v in value)
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        values = parse_key_values(text)
        return (base or cls()).updated(values)

    @classmethod
    def from_file(cls, path: "str | os.PathLike[str]", base: "RunConfig | None" = None) -> "RunConfig":
        return cls.from_text(Path(path).read_text(), base)

    def updated(self, values: dict[str, str]) -> "RunConfig":
        hints = typing.get_type_hints(type(self))
        known = {f.name for f in fields(self)}
        changes = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigKeyError(f"unknown config key {key!r}")
            changes[key] = _convert(key, raw, hints[key])
        return dataclasses.replace(self, **changes).validate()


def parse_key_values(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _convert(key: str, raw: str, hint):
    try:
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is str:
            return raw
        if typing.get_origin(hint) is tuple:
            return tuple(float(v) for v in raw.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigValueError(f"{key}: cannot parse {raw!r}") from exc
    raise ConfigValueError(f"{key}: unsupported type {hint}")
