"""Cycle-by-cycle queue-length estimation from loop-detector data (shockwave method).

Notation follows the usual shockwave write-up: for cycle ``n`` the red light
starts at ``T_g^n`` and the green light at ``T_r^n``; the cycle ends at the next
red start ``T_g^{n+1}``. In code these are ``red_start``, ``green_start`` and
``next_red_start``.

Breakpoints found on the advanced detector (``L_d`` metres upstream of the
stop bar):

* A, B: start and end of the first long block of saturated occupancy,
  i.e. the queue standing on the detector.
* C: end of the discharging platoon, found as the first large time gap after B.

Shockwave speeds (``q`` flow, ``k`` density, subscripts a arrival, m discharge,
j jam)::

    v1 = (0 - q_a) / (k_j - k_a)      queuing wave
    v2 = (q_m - 0) / (k_m - k_j)      discharge wave
    v3 = (q_m - q_a) / (k_m - k_a)    departure wave
    v4 = (0 - q_m) / (k_j - k_m)      stopping wave

Maximum queue, basic model::

    L_max = L_d + (T_C - T_B) / (1/|v2| + 1/v3)
    T_max = T_B + (L_max - L_d) / |v2|

Expansion model, with N vehicles counted on the detector between green start and C::

    L_max = N / k_j + L_d
    T_max = T_r + L_max / |v2|
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .metrics import EmptyInput, TrafficState, flow_from_events, space_mean_speed
from .sim import SimulationOutput, signal_cycles


class DegenerateDensities(ValueError):
    pass


class InvalidBreakpoints(ValueError):
    pass


SHORT_QUEUE_METHODS = ("inputOutput", "expansionOnStopBar")
LONG_QUEUE_MODELS = ("expansion", "basic")
C_VARIANTS = ("C", "C'")


@dataclass(frozen=True)
class LiuConfig:
    detector_distance: float = 122.0  # L_d, m
    jam_density: float = 0.15  # k_j, veh/m
    block_threshold: float = 3.0  # s of saturated occupancy marking A..B
    gap_threshold: float = 2.5  # s; a following gap strictly above this marks C
    discharge_settle: float = 5.0  # s skipped after green start before measuring discharge
    c_variant: str = "C'"
    short_queue_method: str = "inputOutput"
    long_queue_model: str = "expansion"
    free_speed: float = 13.89  # u_0, shifts the input-output count windows
    default_v3: float = 15.0  # m/s, used when the arrival state is unreliable
    default_v2: float = 5.0  # m/s magnitude, used when neither v2 source is available

    def __post_init__(self):
        if min(self.block_threshold, self.gap_threshold, self.jam_density) <= 0:
            raise ValueError("thresholds and jam density must be positive")
        if self.discharge_settle < 0 or self.detector_distance < 0:
            raise ValueError("settle time and detector distance must be non-negative")
        if self.c_variant not in C_VARIANTS:
            raise ValueError(f"unknown breakpoint C variant {self.c_variant!r}")
        if self.short_queue_method not in SHORT_QUEUE_METHODS:
            raise ValueError(f"unknown short-queue method {self.short_queue_method!r}")
        if self.long_queue_model not in LONG_QUEUE_MODELS:
            raise ValueError(f"unknown long-queue model {self.long_queue_model!r}")


@dataclass(frozen=True)
class ShockwaveSet:
    v1: float
    v2: float
    v3: float
    v4: float
    v5: float
    v2_alt: float | None = None


@dataclass(frozen=True)
class QueueEstimate:
    L_max: float
    T_max: float
    n_max: float  # vehicle-count estimate, chained by the input-output method
    method: str  # inputOutput | basic | expansion | oversaturatedHold
    L_min: float | None = None
    T_min: float | None = None
    defaults_used: bool = False  # a shockwave speed fell back to its default


@dataclass
class CycleObservation:
    index: int
    red_start: float  # T_g^n
    green_start: float  # T_r^n
    next_red_start: float  # T_g^{n+1}
    t_a: float | None = None
    t_b: float | None = None
    t_c: float | None = None
    arrival: TrafficState | None = None
    discharge: TrafficState | None = None
    next_arrival: TrafficState | None = None
    adv_count_to_c: int = 0  # advanced-detector passages in [T_r, T_C]
    stop_count_to_c: int = 0  # stop-bar passages in [T_r, C on the stop bar]
    red_arrivals: int = 0  # N_a^{n,r}
    green_arrivals: int = 0  # N_a^{n,g}
    departures: int = 0  # N_l^n

    def __post_init__(self):
        if not self.red_start < self.next_red_start:
            raise ValueError("cycle must have positive length")
        if self.t_b is not None and (self.t_a is None or not self.t_a < self.t_b):
            raise InvalidBreakpoints("B requires an earlier A")
        if self.t_c is not None and self.t_b is not None and not self.t_c > self.t_b:
            raise InvalidBreakpoints("C must follow B")


# --------------------------------------------------------------------------
# detector signal processing


def binary_occupancy(occupancy: Sequence[float], tol: float = 1e-6) -> np.ndarray:
    """1 where the detector has been fully occupied for more than one second.

    A second counts when it and the second before are both at 100 %.
    """
    full = np.asarray(occupancy, dtype=float) >= 1.0 - tol
    out = np.zeros(full.shape, dtype=int)
    out[1:] = full[1:] & full[:-1]
    return out


def detect_breakpoints_ab(
    binary: Sequence[int], window: tuple[float, float], block_threshold: float = 3.0
) -> tuple[float, float] | None:
    """First run of ones inside ``window`` lasting at least ``block_threshold`` s.

    Returns ``(run start, run end)`` in seconds with the end exclusive; runs are
    clipped to the window.
    """
    b = np.asarray(binary).astype(bool)
    lo = max(int(math.ceil(window[0])), 0)
    hi = min(int(math.ceil(window[1])), len(b))
    t = lo
    while t < hi:
        if not b[t]:
            t += 1
            continue
        start = t
        while t < hi and b[t]:
            t += 1
        if t - start >= block_threshold:
            return float(start), float(t)
    return None


def following_gaps(events: np.ndarray) -> np.ndarray:
    """Gap after each vehicle: the time gap reported by the next vehicle (inf for the last)."""
    gaps = np.full(len(events), np.inf)
    if len(events) > 1:
        gaps[:-1] = events[1:, 2]
    return gaps


def detect_breakpoint_c(
    times: Sequence[float],
    gaps_after: Sequence[float],
    t_b: float,
    gap_threshold: float = 2.5,
    variant: str = "C'",
    end: float = math.inf,
) -> float | None:
    """End of the discharging platoon after ``t_b``.

    ``gaps_after[k]`` is the time gap between vehicle ``k`` and vehicle ``k+1``.
    The first vehicle at or after ``t_b`` whose following gap strictly exceeds
    the threshold closes the platoon. Variant ``C'`` returns that vehicle's
    time; variant ``C`` returns the time of the vehicle after the gap (or
    ``None`` when it is not observed). ``None`` when no such gap starts before
    ``end``.
    """
    if variant not in C_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    times = np.asarray(times, dtype=float)
    gaps = np.asarray(gaps_after, dtype=float)
    for k in range(len(times)):
        if times[k] < t_b:
            continue
        if times[k] >= end:
            return None
        if gaps[k] > gap_threshold:
            if variant == "C'":
                return float(times[k])
            return float(times[k + 1]) if k + 1 < len(times) else None
    return None


def estimate_traffic_state(events: np.ndarray, window: tuple[float, float]) -> TrafficState:
    """Flow, density and space-mean speed from the events whose front time lies in ``window``.

    ``events`` rows are ``(t_front, t_o, t_g, speed)``. Fewer than two events
    give an unreliable all-zero state.
    """
    lo, hi = window
    if not hi > lo:
        raise ValueError("window must have positive length")
    ev = np.asarray(events, dtype=float).reshape(-1, 4)
    sel = ev[(ev[:, 0] >= lo) & (ev[:, 0] <= hi)]
    if len(sel) < 2:
        return TrafficState(0.0, 0.0, 0.0, reliable=False)
    try:
        q = flow_from_events(list(zip(sel[:, 1], sel[:, 2])))
        u = space_mean_speed(sel[:, 3])
    except (EmptyInput, ValueError):
        return TrafficState(0.0, 0.0, 0.0, reliable=False)
    return TrafficState.from_flow_speed(q, u)


def _ratio(num: float, den: float) -> float:
    if abs(den) < 1e-9:
        raise DegenerateDensities("density difference vanishes")
    return num / den


def shockwave_velocities(
    arrival: TrafficState,
    discharge: TrafficState,
    jam_density: float,
    t_b: float | None = None,
    detector_distance: float = 0.0,
    green_start: float = 0.0,
    next_arrival: TrafficState | None = None,
) -> ShockwaveSet:
    q_a, k_a = arrival.flow, arrival.density
    q_m, k_m = discharge.flow, discharge.density
    k_j = jam_density
    v1 = _ratio(0.0 - q_a, k_j - k_a)
    v2 = _ratio(q_m - 0.0, k_m - k_j)
    v3 = _ratio(q_m - q_a, k_m - k_a)
    v4 = _ratio(0.0 - q_m, k_j - k_m)
    if next_arrival is not None:
        v5 = _ratio(0.0 - next_arrival.flow, k_j - next_arrival.density)
    else:
        v5 = v1
    v2_alt = None
    if t_b is not None and t_b > green_start:
        v2_alt = detector_distance / (t_b - green_start)
    return ShockwaveSet(v1, v2, v3, v4, v5, v2_alt)


# --------------------------------------------------------------------------
# models


def basic_model(
    t_b: float,
    t_c: float,
    v2_mag: float,
    v3: float,
    detector_distance: float,
    next_red_start: float | None = None,
    v4_mag: float | None = None,
) -> QueueEstimate:
    """Maximum (and, given ``v4_mag``, minimum) queue from breakpoints B and C."""
    if t_c < t_b:
        raise InvalidBreakpoints("T_C precedes T_B")
    if not (v2_mag > 0 and v3 > 0):
        raise InvalidBreakpoints("wave speeds must be positive")
    L_max = detector_distance + (t_c - t_b) / (1.0 / v2_mag + 1.0 / v3)
    T_max = t_b + (L_max - detector_distance) / v2_mag
    L_min = T_min = None
    if next_red_start is not None and v4_mag is not None and v4_mag > 0:
        L_min = (L_max / v3 + T_max - next_red_start) / (1.0 / v3 + 1.0 / v4_mag)
        T_min = next_red_start + L_min / v4_mag
    return QueueEstimate(L_max, T_max, 0.0, "basic", L_min, T_min)


def expansion_model(
    n: float, jam_density: float, detector_distance: float, v2_mag: float, green_start: float
) -> QueueEstimate:
    """Maximum queue from the count of vehicles that passed the detector before C."""
    if n < 0:
        raise ValueError("vehicle count must be non-negative")
    L_max = n / jam_density + detector_distance
    return QueueEstimate(L_max, green_start + L_max / v2_mag, float(n), "expansion")


def input_output_method(
    n_max_prev: float, n_left_prev: float, n_green_prev: float, n_red: float
) -> float:
    """Queued-vehicle count: leftover of the previous cycle plus this red's arrivals."""
    return max(n_max_prev - n_left_prev + n_green_prev, 0.0) + n_red


# --------------------------------------------------------------------------
# per-lane processing


@dataclass
class LaneDetectorData:
    """What a controller sees on one approach lane: detector events, occupancy and signal."""

    stop_events: np.ndarray  # (n, 4): t_front, t_o, t_g, speed
    adv_events: np.ndarray
    adv_occupancy: np.ndarray  # 1 Hz
    tls_green: np.ndarray  # 1 Hz, 1 = green

    @classmethod
    def from_output(cls, out: SimulationOutput, lane: int) -> "LaneDetectorData":
        return cls(
            stop_events=out.stop_events[lane],
            adv_events=out.adv_events[lane],
            adv_occupancy=out.adv_occupancy[lane],
            tls_green=out.tls_green[lane],
        )


def _count(events: np.ndarray, lo: float, hi: float, closed: bool = False) -> int:
    t = events[:, 0] if len(events) else np.zeros(0)
    upper = t <= hi if closed else t < hi
    return int(np.sum((t >= lo) & upper))


def observe_cycles(data: LaneDetectorData, cfg: LiuConfig) -> list[CycleObservation]:
    """Breakpoints, traffic states and counts for every complete cycle of one lane."""
    cycles = signal_cycles(data.tls_green)
    binary = binary_occupancy(data.adv_occupancy)
    adv = np.asarray(data.adv_events, dtype=float).reshape(-1, 4)
    stop = np.asarray(data.stop_events, dtype=float).reshape(-1, 4)
    adv_gaps, stop_gaps = following_gaps(adv), following_gaps(stop)
    shift = cfg.detector_distance / cfg.free_speed
    obs: list[CycleObservation] = []
    prev_c = None
    for n, (red, green, end) in enumerate(cycles):
        o = CycleObservation(n, red, green, end)
        ab = detect_breakpoints_ab(binary, (red, end), cfg.block_threshold)
        if ab is not None:
            o.t_a, t_b = ab
            if t_b < end and t_b > o.t_a:
                o.t_b = t_b
                o.t_c = detect_breakpoint_c(
                    adv[:, 0], adv_gaps, t_b, cfg.gap_threshold, cfg.c_variant, end
                )
                if o.t_c is not None and not o.t_c > o.t_b:
                    o.t_c = None
        if o.t_a is not None:
            lo = prev_c if prev_c is not None else red
            if o.t_a > lo:
                o.arrival = estimate_traffic_state(adv, (lo, o.t_a))
        if end > green + cfg.discharge_settle:
            o.discharge = estimate_traffic_state(stop, (green + cfg.discharge_settle, end))
        if o.t_c is not None:
            o.adv_count_to_c = _count(adv, green, o.t_c, closed=True)
        # stop-bar platoon: vehicles from green start until the first large gap
        c_stop = detect_breakpoint_c(
            stop[:, 0], stop_gaps, green, cfg.gap_threshold, "C'", end
        )
        o.stop_count_to_c = (
            _count(stop, green, c_stop, closed=True) if c_stop is not None
            else _count(stop, green, end)
        )
        o.red_arrivals = _count(adv, red - shift, green)
        o.green_arrivals = _count(adv, green, end - shift)
        o.departures = _count(stop, green, cycles[n + 1][1] if n + 1 < len(cycles) else end)
        prev_c = o.t_c
        obs.append(o)
    for a, b in zip(obs, obs[1:]):
        a.next_arrival = b.arrival
    return obs


def _discharge_v2(obs: CycleObservation, cfg: LiuConfig) -> tuple[float, bool]:
    """|v2| from the discharge state when possible, else the default."""
    d = obs.discharge
    if d is not None and d.reliable:
        try:
            v2 = _ratio(d.flow, d.density - cfg.jam_density)
            if v2 < 0:
                return -v2, False
        except DegenerateDensities:
            pass
    return cfg.default_v2, True


def estimate_cycle(
    obs: CycleObservation,
    cfg: LiuConfig,
    prev: QueueEstimate | None = None,
    prev_obs: CycleObservation | None = None,
) -> QueueEstimate:
    """Dispatch one cycle to the short-queue method, the hold rule or a long-queue model."""
    kj, Ld = cfg.jam_density, cfg.detector_distance
    if obs.t_a is None:
        v2_mag, flagged = _discharge_v2(obs, cfg)
        if cfg.short_queue_method == "inputOutput":
            n_prev = prev.n_max if prev is not None else 0.0
            left = prev_obs.departures if prev_obs is not None else 0
            green_prev = prev_obs.green_arrivals if prev_obs is not None else 0
            n = input_output_method(n_prev, left, green_prev, obs.red_arrivals)
            L = n / kj
            return QueueEstimate(L, obs.green_start + L / v2_mag, n, "inputOutput",
                                 defaults_used=flagged)
        est = expansion_model(obs.stop_count_to_c, kj, 0.0, v2_mag, obs.green_start)
        return replace(est, method="expansionOnStopBar", defaults_used=flagged)

    if obs.t_b is None or obs.t_c is None:
        if prev is not None:
            return replace(prev, method="oversaturatedHold")
        return QueueEstimate(Ld, obs.green_start, Ld * kj, "oversaturatedHold")

    flagged = False
    v2_mag = v3 = v4_mag = None
    try:
        if obs.arrival is None or obs.discharge is None:
            raise DegenerateDensities("missing traffic state")
        if not (obs.arrival.reliable and obs.discharge.reliable):
            raise DegenerateDensities("unreliable traffic state")
        sw = shockwave_velocities(
            obs.arrival, obs.discharge, kj, obs.t_b, Ld, obs.green_start, obs.next_arrival
        )
        v2_mag = sw.v2_alt if sw.v2_alt else abs(sw.v2)
        v3 = sw.v3 if sw.v3 > 0 else None
        v4_mag = abs(sw.v4)
    except DegenerateDensities:
        flagged = True
    if v2_mag is None:
        v2_mag = Ld / (obs.t_b - obs.green_start) if obs.t_b > obs.green_start else cfg.default_v2
    if v3 is None:
        v3, flagged = cfg.default_v3, True

    if cfg.long_queue_model == "basic":
        est = basic_model(obs.t_b, obs.t_c, v2_mag, v3, Ld, obs.next_red_start, v4_mag)
        est = replace(est, n_max=est.L_max * kj)
    else:
        est = expansion_model(obs.adv_count_to_c, kj, Ld, v2_mag, obs.green_start)
    return replace(est, defaults_used=flagged)


@dataclass
class LaneEstimates:
    lane: str
    observations: list[CycleObservation] = field(default_factory=list)
    estimates: list[QueueEstimate] = field(default_factory=list)


def estimate_lane(data: LaneDetectorData, cfg: LiuConfig, lane_id: str = "") -> LaneEstimates:
    obs = observe_cycles(data, cfg)
    result = LaneEstimates(lane_id, obs)
    prev = prev_obs = None
    for o in obs:
        est = estimate_cycle(o, cfg, prev, prev_obs)
        result.estimates.append(est)
        prev, prev_obs = est, o
    return result


def estimate_output(
    out: SimulationOutput, cfg: LiuConfig, lanes: Sequence[int] | None = None
) -> dict[int, LaneEstimates]:
    """Estimate every approach lane (those carrying an advanced detector) of a run."""
    if lanes is None:
        lanes = [i for i in range(len(out.lane_ids)) if _has_detector(out, i)]
    return {
        i: estimate_lane(LaneDetectorData.from_output(out, i), cfg, out.lane_ids[i]) for i in lanes
    }


def _has_detector(out: SimulationOutput, lane: int) -> bool:
    # non-approach lanes are always green and never produce detector rows
    return bool((out.tls_green[lane] == 0).any())


def save_estimates_csv(results: dict[int, LaneEstimates], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lane", "cycle", "T_r", "L_max", "T_max", "method"])
        for res in results.values():
            for o, e in zip(res.observations, res.estimates):
                w.writerow([res.lane, o.index, o.green_start, repr(e.L_max), repr(e.T_max), e.method])
