"""Loop-detector traffic quantities and evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class EmptyInput(ValueError):
    pass


class NonPositiveSpeed(ValueError):
    pass


class ZeroSpeed(ZeroDivisionError):
    pass


class LengthMismatch(ValueError):
    pass


@dataclass(frozen=True)
class TrafficState:
    flow: float  # veh/s
    density: float  # veh/m
    speed: float  # space-mean speed, m/s
    reliable: bool = True

    @classmethod
    def from_flow_speed(cls, q: float, u_s: float, reliable: bool = True) -> "TrafficState":
        return cls(flow=q, density=density(q, u_s), speed=u_s, reliable=reliable)


@dataclass(frozen=True)
class PressureInputs:
    saturation_flow: float
    own_queue: float
    outputs: Sequence[tuple[float, float]] = ()  # (routing proportion, output queue)

    def __post_init__(self):
        if sum(r for r, _ in self.outputs) > 1 + 1e-12:
            raise ValueError("routing proportions must sum to at most 1")


def space_mean_speed(speeds: Sequence[float]) -> float:
    """Harmonic mean of individual vehicle speeds."""
    u = np.asarray(speeds, dtype=float)
    if u.size == 0:
        raise EmptyInput("no speeds")
    if np.any(u <= 0):
        raise NonPositiveSpeed("speeds must be positive")
    return float(1.0 / np.mean(1.0 / u))


def flow_from_events(events: Sequence[tuple[float, float]]) -> float:
    """Flow (veh/s) from per-vehicle (occupancy time, time gap) pairs."""
    if len(events) == 0:
        raise EmptyInput("no detector events")
    headways = np.array([t_o + t_g for t_o, t_g in events], dtype=float)
    if np.any(headways <= 0):
        raise ValueError("occupancy time plus gap must be positive")
    return float(1.0 / headways.mean())


def density(q: float, u_s: float) -> float:
    if u_s == 0:
        raise ZeroSpeed("space-mean speed is zero")
    if u_s < 0:
        raise NonPositiveSpeed("space-mean speed must be positive")
    return q / u_s


def lane_pressure(inputs: PressureInputs) -> float:
    downstream = sum(r * x for r, x in inputs.outputs)
    return inputs.saturation_flow * (inputs.own_queue - downstream)


@dataclass(frozen=True)
class ErrorMetrics:
    mape: float  # percent; nan when every observation is zero
    mae: float
    skipped_zero: int = 0


def error_metrics(observed, estimated) -> ErrorMetrics:
    """MAPE (%) over non-zero observations and MAE over all samples.

    Zero observations are left out of the MAPE mean and counted in
    ``skipped_zero``.
    """
    obs = np.asarray(observed, dtype=float).ravel()
    est = np.asarray(estimated, dtype=float).ravel()
    if obs.shape != est.shape:
        raise LengthMismatch(f"{obs.shape} vs {est.shape}")
    if obs.size == 0:
        raise EmptyInput("empty series")
    err = np.abs(obs - est)
    nz = obs != 0
    mape = float(np.mean(err[nz] / np.abs(obs[nz])) * 100) if nz.any() else float("nan")
    return ErrorMetrics(mape=mape, mae=float(err.mean()), skipped_zero=int((~nz).sum()))


def mad(values: Sequence[float]) -> float:
    """Mean absolute deviation from the mean."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise EmptyInput("no values")
    return float(np.mean(np.abs(v - v.mean())))
