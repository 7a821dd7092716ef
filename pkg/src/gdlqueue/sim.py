"""Deterministic-seeded microscopic simulator with loop and area detectors.

Vehicles follow a discrete-time safe-speed rule on lanes of a
:class:`~gdlqueue.network.RoadNetwork`. Every approach lane carries a stop-bar
and an advanced single-loop detector ("e1"); every lane carries a lane-long
area detector ("e2"). All detector streams are reported at 1 Hz.

Positions are metres of the vehicle *front* from the upstream end of its lane;
a vehicle occupies ``[pos - L_e, pos]``. The stop bar of a lane is at
``pos == lane.length``.
"""

from __future__ import annotations

import csv
import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .network import RoadNetwork, movement_between, turn


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimParams:
    free_speed: float = 13.89  # u_0, m/s
    effective_length: float = 6.67  # L_e = 1/k_j, m
    accel: float = 2.6
    decel: float = 4.5
    reaction_time: float = 1.5  # equilibrium time gap, s
    close_gap: float = 1.0  # below this gap to a standing leader, close up in one step
    dt: float = 0.5
    halt_speed: float = 0.1
    start_gap: float = 2.0  # a halted vehicle waits until its leader is this far away
    jam_gap: float = 2.0  # max gap inside a halted platoon
    yield_time: float = 5.0  # permissive left turners need this much opposing headway
    lane_changing: bool = False
    wrong_lane_prob: float = 0.4  # with lane changing: share entering on the rightmost lane

    @property
    def jam_density(self) -> float:
        return 1.0 / self.effective_length


# --------------------------------------------------------------------------
# traffic lights


@dataclass(frozen=True)
class TlsProgram:
    """Fixed-time program: ordered ``(duration, green lane ids)`` phases."""

    phases: tuple[tuple[float, frozenset], ...]
    mode: str = "simplified"
    offset: float = 0.0

    def __post_init__(self):
        if not self.phases or any(d <= 0 for d, _ in self.phases):
            raise ConfigError("phase durations must be positive")
        if self.mode not in ("simplified", "realistic"):
            raise ConfigError(f"unknown tls mode {self.mode!r}")

    @property
    def cycle(self) -> float:
        return sum(d for d, _ in self.phases)

    def green_lanes(self, t: float) -> frozenset:
        tau = (t + self.offset) % self.cycle
        for d, lanes in self.phases:
            if tau < d:
                return lanes
            tau -= d
        return self.phases[-1][1]


def default_programs(
    network: RoadNetwork, mode: str = "simplified", green: float = 30.0
) -> dict[str, TlsProgram]:
    """One program per intersection.

    ``simplified``: each approach heading gets an exclusive green phase.
    ``realistic``: north-south and east-west share phases; left turns are
    permissive and must yield to opposing traffic.
    """
    programs = {}
    for row in network.intersections:
        for j in row:
            by_heading: dict[str, set] = {}
            for lane in network.approach_lanes:
                if lane.junction == j:
                    by_heading.setdefault(lane.heading, set()).add(lane.id)
            if mode == "simplified":
                groups = [by_heading.get(h, set()) for h in ("N", "E", "S", "W")]
            elif mode == "realistic":
                groups = [
                    by_heading.get("N", set()) | by_heading.get("S", set()),
                    by_heading.get("E", set()) | by_heading.get("W", set()),
                ]
            else:
                raise ConfigError(f"unknown tls mode {mode!r}")
            programs[j] = TlsProgram(
                tuple((green, frozenset(g)) for g in groups), mode=mode
            )
    return programs


def two_phase_program(
    network: RoadNetwork, lane_ids, green: float, red: float
) -> dict[str, TlsProgram]:
    """Red first for ``lane_ids`` (then green); every other approach the reverse."""
    lane_ids = frozenset(lane_ids)
    programs = {}
    for row in network.intersections:
        for j in row:
            own = {l.id for l in network.approach_lanes if l.junction == j}
            programs[j] = TlsProgram(
                ((red, frozenset(own - lane_ids)), (green, frozenset(own & lane_ids))),
            )
    return programs


# --------------------------------------------------------------------------
# trips


@dataclass(frozen=True)
class Trip:
    id: int
    depart: float
    route: tuple[str, ...]  # link ids, entry link first


@dataclass(frozen=True)
class TripTable:
    trips: tuple[Trip, ...]

    def __len__(self):
        return len(self.trips)

    def to_csv_bytes(self) -> bytes:
        lines = ["id,depart,route"]
        lines += [f"{t.id},{t.depart!r},{' '.join(t.route)}" for t in self.trips]
        return ("\n".join(lines) + "\n").encode()


def _link_successors(network: RoadNetwork) -> dict[str, list[str]]:
    succ = {}
    for lid, link in network.links.items():
        if link.kind == "exit":
            succ[lid] = []
            continue
        out = []
        for m in ("right", "straight", "left"):
            nxt = network.out_link(link.to_node, turn(link.heading, m))
            if nxt is not None:
                out.append(nxt.id)
        succ[lid] = out
    return succ


def _distances_to(target: str, succ: dict[str, list[str]]) -> dict[str, int]:
    pred: dict[str, list[str]] = {k: [] for k in succ}
    for a, bs in succ.items():
        for b in bs:
            pred[b].append(a)
    dist = {target: 0}
    queue = deque([target])
    while queue:
        b = queue.popleft()
        for a in pred[b]:
            if a not in dist:
                dist[a] = dist[b] + 1
                queue.append(a)
    return dist


def generate_trips(
    network: RoadNetwork, arrival_rate: float, duration: float, seed: int
) -> TripTable:
    """Poisson departures over fringe entries with random shortest-path routes."""
    if arrival_rate < 0:
        raise ConfigError("arrival rate must be non-negative")
    rng = np.random.default_rng(seed)
    if arrival_rate == 0:
        return TripTable(())
    succ = _link_successors(network)
    entries = sorted(l.id for l in network.entry_links)
    exits = sorted(l.id for l in network.exit_links)
    dist = {x: _distances_to(x, succ) for x in exits}
    trips = []
    t = rng.exponential(1.0 / arrival_rate)
    while t < duration:
        entry = entries[rng.integers(len(entries))]
        candidates = [
            x for x in exits
            if entry in dist[x] and network.links[x].to_node != network.links[entry].from_node
        ]
        exit_ = candidates[rng.integers(len(candidates))]
        route = [entry]
        d = dist[exit_]
        while route[-1] != exit_:
            options = [b for b in succ[route[-1]] if d.get(b, 1 << 30) == d[route[-1]] - 1]
            route.append(options[rng.integers(len(options))])
        trips.append(Trip(len(trips), float(t), tuple(route)))
        t += rng.exponential(1.0 / arrival_rate)
    return TripTable(tuple(trips))


def periodic_trips(route, headway: float, duration: float, start: float = 0.0) -> TripTable:
    """Deterministic departures every ``headway`` seconds along one route."""
    times = np.arange(start, duration, headway)
    return TripTable(tuple(Trip(i, float(t), tuple(route)) for i, t in enumerate(times)))


# --------------------------------------------------------------------------
# state


@dataclass(eq=False)
class Vehicle:
    id: int
    route: tuple[str, ...]
    ridx: int
    lane: int
    pos: float
    speed: float
    depart: float
    next_lane: int | None = None
    amber: bool = False
    red_checked: bool = False  # amber decision already taken for the current red
    in_box: bool = False
    halted: bool = False
    halts_here: int = 0
    tail_lane: int | None = None  # previous lane while the rear still overhangs it
    tail_offset: float = 0.0


@dataclass
class _Detector:
    x: float
    events: list = field(default_factory=list)  # [t_front, t_rear|None, t_gap]
    open: dict = field(default_factory=dict)  # vehicle id -> event index
    last_rear: float = 0.0


@dataclass
class SimulationOutput:
    lane_ids: list[str]
    duration: int
    seed: int
    arrival_rate: float
    tls_mode: str
    network_digest: str
    # [lane, second] arrays; detector rows for non-approach lanes stay zero
    stop_count: np.ndarray
    stop_occupancy: np.ndarray
    stop_speed: np.ndarray
    adv_count: np.ndarray
    adv_occupancy: np.ndarray
    adv_speed: np.ndarray
    started_halts: np.ndarray
    max_jam: np.ndarray
    n_veh_seen: np.ndarray
    lane_entries: np.ndarray
    lane_exits: np.ndarray
    tls_green: np.ndarray
    # vehicles with front between the advanced detector and the stop bar, at each whole second
    section_count: np.ndarray
    # per lane: (n, 4) array of (t_front, t_o, t_g, speed)
    stop_events: list[np.ndarray]
    adv_events: list[np.ndarray]
    multi_halt_vehicles: np.ndarray  # per lane count of vehicles halting >= 2 times
    min_gap: float  # smallest in-lane bumper gap seen, m
    entered: int = 0
    exited: int = 0
    on_network: int = 0
    params: SimParams = field(default_factory=SimParams)

    def cycles(self, lane: int) -> list[tuple[float, float, float]]:
        """``(red start, green start, next red start)`` per complete signal cycle."""
        return signal_cycles(self.tls_green[lane])


def signal_cycles(green: np.ndarray) -> list[tuple[float, float, float]]:
    g = np.asarray(green).astype(int)
    red_starts = [t for t in range(1, len(g)) if g[t - 1] == 1 and g[t] == 0]
    if len(g) and g[0] == 0:
        red_starts.insert(0, 0)
    out = []
    for k, r in enumerate(red_starts):
        greens = np.nonzero(g[r:] == 1)[0]
        if len(greens) == 0:
            break
        gs = r + int(greens[0])
        end = red_starts[k + 1] if k + 1 < len(red_starts) else len(g)
        out.append((float(r), float(gs), float(end)))
    return out


# --------------------------------------------------------------------------
# dynamics


def _safe_speed(gap: float, v_leader: float, p: SimParams) -> float:
    """Largest speed that still allows stopping behind a braking leader.

    Behind a moving leader the follower plans with ``reaction_time``, which
    keeps an equilibrium gap of ``reaction_time * v`` and sets the saturation
    flow. Behind a standing leader it plans with one step only, so it keeps
    free speed until it has to brake at full deceleration.
    """
    b = p.decel
    tau = p.reaction_time if v_leader >= p.halt_speed else p.dt
    return -b * tau + math.sqrt((b * tau) ** 2 + v_leader * v_leader + 2 * b * max(gap, 0.0))


class Simulator:
    """Mutable single-run simulator. One instance per run."""

    def __init__(
        self, network, programs, trips: TripTable, duration: int, params=SimParams(), seed=0
    ):
        if duration <= 0:
            raise ConfigError("duration must be positive")
        sub = int(round(1.0 / params.dt))
        if abs(sub * params.dt - 1.0) > 1e-9:
            raise ConfigError("dt must divide one second")
        self.duration = int(duration)
        self.seed = seed
        self.arrival_rate = 0.0
        self.net = network
        self.p = params
        self.programs = programs
        self.rng = np.random.default_rng(seed + 7919)
        self.lane_objs = network.lanes
        n = len(self.lane_objs)
        self.lane_len = np.array([l.length for l in self.lane_objs])
        self.lanes: list[list[Vehicle]] = [[] for _ in range(n)]
        self.link_lane_idx = {
            lid: [network.lane_index(f"{lid}_{k}") for k in range(link.lane_count)]
            for lid, link in network.links.items()
        }
        self.pending = deque(sorted(trips.trips, key=lambda t: (t.depart, t.id)))
        self.backlog: dict[str, deque] = {l.id: deque() for l in network.entry_links}
        self.time = 0.0
        self.entered = 0
        self.exited = 0
        self.min_gap = math.inf
        self._green_cache: tuple[float, set] | None = None
        # opposing approach links for permissive left turns
        self.opposing: dict[str, str | None] = {}
        for lid, link in network.links.items():
            if link.kind == "exit":
                continue
            opp_heading = turn(turn(link.heading, "left"), "left")
            opp = [
                o.id for o in network.links.values()
                if o.kind != "exit" and o.to_node == link.to_node and o.heading == opp_heading
            ]
            self.opposing[lid] = opp[0] if opp else None
        self.lane_junction = [l.junction for l in self.lane_objs]
        self.junction_lanes: dict[str, list[int]] = {}
        for i, lane in enumerate(self.lane_objs):
            if lane.is_approach:
                self.junction_lanes.setdefault(lane.junction, []).append(i)
        self.detectors: dict[tuple[int, str], _Detector] = {}
        for i, lane in enumerate(self.lane_objs):
            if lane.is_approach:
                self.detectors[(i, "stop")] = _Detector(lane.length)
                self.detectors[(i, "adv")] = _Detector(lane.length - network.detector_distance)
        self.multi_halt = np.zeros(n, dtype=int)
        self._occ_buf: dict = {}
        shape = (n, self.duration)
        self.started = np.zeros(shape, dtype=int)
        self.jam = np.zeros(shape)
        self.seen = np.zeros(shape, dtype=int)
        self.entries = np.zeros(shape, dtype=int)
        self.exits = np.zeros(shape, dtype=int)
        self.green = np.zeros(shape, dtype=int)
        self.section = np.zeros(shape, dtype=int)

    # -- signals -------------------------------------------------------------
    def green_set(self, t: float) -> set:
        if self._green_cache and self._green_cache[0] == t:
            return self._green_cache[1]
        s = set()
        for prog in self.programs.values():
            s |= prog.green_lanes(t)
        self._green_cache = (t, s)
        return s

    def is_green(self, lane_idx: int, t: float) -> bool:
        lane = self.lane_objs[lane_idx]
        if not lane.is_approach:
            return True
        return lane.id in self.green_set(t)

    # -- routing helpers -----------------------------------------------------
    def next_movement(self, v: Vehicle) -> str | None:
        if v.ridx + 1 >= len(v.route):
            return None
        a = self.net.links[v.route[v.ridx]]
        b = self.net.links[v.route[v.ridx + 1]]
        return movement_between(a.heading, b.heading)

    def movement_after(self, v: Vehicle, ridx: int) -> str | None:
        if ridx + 1 >= len(v.route):
            return None
        a = self.net.links[v.route[ridx]]
        b = self.net.links[v.route[ridx + 1]]
        return movement_between(a.heading, b.heading)

    def choose_lane(self, v: Vehicle, link_id: str, ridx: int) -> int:
        """Lane to enter ``link_id`` on; the vehicle then needs movement ``ridx``."""
        lanes = self.link_lane_idx[link_id]
        m = self.movement_after(v, ridx)
        if m is None:
            ok = lanes
        else:
            ok = [i for i in lanes if m in self.lane_objs[i].movements]
        if self.p.lane_changing and len(lanes) > 1 and self.rng.random() < self.p.wrong_lane_prob:
            return lanes[0]
        if v.lane >= 0:
            # keep the lane index across a junction where possible, so parallel
            # lanes discharging together do not merge into one target lane
            here = self.lane_objs[v.lane].index
            return min(ok, key=lambda i: (abs(self.lane_objs[i].index - here), len(self.lanes[i])))
        # fewest vehicles, rightmost on ties
        return min(ok, key=lambda i: (len(self.lanes[i]), self.lane_objs[i].index))

    def lane_ok(self, v: Vehicle) -> bool:
        m = self.next_movement(v)
        return m is None or m in self.lane_objs[v.lane].movements

    # -- main loop -----------------------------------------------------------
    def run(self) -> SimulationOutput:
        sub = int(round(1.0 / self.p.dt))
        for _ in range(self.duration * sub):
            self.step()
        return self.output()

    def step(self) -> None:
        """Advance every vehicle by one ``dt``."""
        p = self.p
        dt = p.dt
        t = self.time
        sec = min(int(t + 1e-9), self.duration - 1)
        Le = p.effective_length
        n = len(self.lanes)
        if abs(t - round(t)) < 1e-9:
            for i in range(n):
                self.green[i, sec] = 1 if self.is_green(i, t) else 0
                det = self.detectors.get((i, "adv"))
                if det is not None:
                    L = self.lane_len[i]
                    self.section[i, sec] = sum(1 for v in self.lanes[i] if det.x < v.pos <= L)
        started, jam, entries, exits = self.started, self.jam, self.entries, self.exits
        self._insert(t, sec)
        greens = self.green_set(t)

        # speed decisions from the positions at the start of the step
        virtual_last: dict[int, tuple[float, float]] = {}
        new_speed: dict[int, float] = {}
        for li, vehicles in enumerate(self.lanes):
            lane = self.lane_objs[li]
            L = lane.length
            for k, v in enumerate(vehicles):
                if k > 0:
                    leader = vehicles[k - 1]
                    gap = leader.pos - Le - v.pos
                    vs = self._follow(v, gap, leader.speed, is_vehicle=True)
                else:
                    vs = self._front_speed(v, li, lane, L, t, greens, virtual_last)
                new_speed[v.id] = vs
                if k == 0 and v.pos + vs * dt > L and v.next_lane is not None:
                    virtual_last[v.next_lane] = (v.pos + vs * dt - L, vs)

        # move
        for li, vehicles in enumerate(self.lanes):
            for v in vehicles:
                p0 = v.pos
                vs = new_speed[v.id]
                p1 = p0 + vs * dt
                self._detect(li, v, p0, p1, vs, t)
                if v.tail_lane is not None:
                    off = v.tail_offset
                    self._detect(v.tail_lane, v, p0 + off, p1 + off, vs, t)
                    if p1 - Le > 1e-6:
                        v.tail_lane = None
                v.pos = p1
                was_halted = v.halted
                v.speed = vs
                v.halted = vs < p.halt_speed
                if v.halted and not was_halted:
                    started[li, sec] += 1
                    v.halts_here += 1
                    if v.halts_here == 2:
                        self.multi_halt[li] += 1

        # junction transfers and network exits
        for li in range(n):
            vehicles = self.lanes[li]
            L = self.lane_objs[li].length
            while vehicles and vehicles[0].pos > L:
                v = vehicles.pop(0)
                exits[li, sec] += 1
                if v.ridx + 1 >= len(v.route):
                    self.exited += 1
                    continue
                target = v.next_lane
                if target is None:
                    target = self.choose_lane(v, v.route[v.ridx + 1], v.ridx + 1)
                v.ridx += 1
                v.pos -= L
                v.lane = target
                v.next_lane = None
                v.amber = False
                v.red_checked = False
                v.in_box = False
                v.halts_here = 0
                v.tail_lane = li
                v.tail_offset = L
                self.lanes[target].append(v)
                entries[target, sec] += 1
        for vehicles in self.lanes:
            vehicles.sort(key=lambda v: -v.pos)

        if p.lane_changing:
            self._lane_changes(entries, exits, sec)

        for li, vehicles in enumerate(self.lanes):
            for a, b in zip(vehicles, vehicles[1:]):
                g = a.pos - Le - b.pos
                if g < self.min_gap:
                    self.min_gap = g
            jam[li, sec] = max(jam[li, sec], self._jam_length(vehicles, self.lane_objs[li].length))
        self.time = t + dt
        if abs(self.time - round(self.time)) < 1e-9 and round(self.time) - 1 == sec:
            for i in range(n):
                self.seen[i, sec] = len(self.lanes[i])

    def _follow(self, v: Vehicle, gap: float, v_leader: float, is_vehicle: bool) -> float:
        p = self.p
        dt = p.dt
        if gap <= 0:
            return 0.0
        if is_vehicle and v.speed < p.halt_speed and gap < p.start_gap:
            return 0.0  # start-up delay inside a standing queue
        free = min(v.speed + p.accel * dt, p.free_speed)
        safe = min(_safe_speed(gap, v_leader, p), gap / dt)
        vs = min(free, safe)
        if v_leader < p.halt_speed and gap < p.close_gap:
            vs = min(free, gap / dt)  # close up to a standing leader
        return max(vs, 0.0)

    def _front_speed(self, v, li, lane, L, t, greens, virtual_last) -> float:
        p = self.p
        gap_bar = L - v.pos
        free = min(v.speed + p.accel * p.dt, p.free_speed)
        if not lane.is_approach:
            return free  # exit link: drive off the network
        if not self.lane_ok(v):
            return self._follow(v, gap_bar, 0.0, is_vehicle=False)
        green = lane.id in greens
        movement = self.next_movement(v)
        must_stop = False
        if not green:
            if v.in_box and movement == "left":
                must_stop = self._left_conflict(v)
            elif not v.amber:
                # decided once, when the vehicle first sees this red
                if (
                    not v.red_checked
                    and v.speed > p.halt_speed
                    and v.speed * v.speed / (2 * p.decel) > gap_bar
                ):
                    v.amber = True
                else:
                    must_stop = True
                v.red_checked = True
        else:
            v.red_checked = False
            # a standing vehicle lets amber runners clear the junction first
            if v.speed < p.halt_speed and self._amber_in_junction(lane.junction):
                must_stop = True
        if green and movement == "left" and self.programs[lane.junction].mode == "realistic":
            must_stop = self._left_conflict(v)
            if must_stop and gap_bar < 1.0:
                v.in_box = True
        if must_stop:
            return self._follow(v, gap_bar, 0.0, is_vehicle=False)
        if v.next_lane is None:
            v.next_lane = self.choose_lane(v, v.route[v.ridx + 1], v.ridx + 1)
        target = v.next_lane
        if target in virtual_last:
            tpos, tspeed = virtual_last[target]
        elif self.lanes[target]:
            last = self.lanes[target][-1]
            tpos, tspeed = last.pos, last.speed
        else:
            return free
        gap = gap_bar + tpos - p.effective_length
        return self._follow(v, gap, tspeed, is_vehicle=True)

    def _amber_in_junction(self, junction: str) -> bool:
        return any(self.lanes[j] and self.lanes[j][0].amber for j in self.junction_lanes[junction])

    def _left_conflict(self, v: Vehicle) -> bool:
        opp = self.opposing.get(v.route[v.ridx])
        if opp is None:
            return False
        p = self.p
        for li in self.link_lane_idx[opp]:
            if not self.is_green(li, self.time) and not any(u.amber for u in self.lanes[li]):
                continue
            for u in self.lanes[li]:
                m = self.next_movement(u)
                if m == "left":
                    continue
                dist = self.lane_objs[li].length - u.pos
                if u.speed < p.halt_speed:
                    if dist < 1.0 and (self.is_green(li, self.time) or u.amber):
                        return True
                    continue
                if dist / u.speed < p.yield_time:
                    return True
        return False

    def _insert(self, t, sec):
        p = self.p
        while self.pending and self.pending[0].depart <= t + 1e-9:
            trip = self.pending.popleft()
            self.backlog[trip.route[0]].append(trip)
        for link_id, queue in self.backlog.items():
            while queue:
                trip = queue[0]
                v = Vehicle(trip.id, trip.route, 0, -1, 0.0, 0.0, trip.depart)
                li = self.choose_lane(v, link_id, 0)
                vehicles = self.lanes[li]
                speed = p.free_speed
                if vehicles:
                    last = vehicles[-1]
                    gap = last.pos - p.effective_length
                    if gap < 0:
                        break
                    speed = min(speed, _safe_speed(gap, last.speed, p), gap / p.dt)
                queue.popleft()
                v.lane = li
                v.speed = speed
                vehicles.append(v)
                self.entries[li, sec] += 1
                self.entered += 1

    def _detect(self, li, v, p0, p1, vs, t):
        for kind in ("stop", "adv"):
            det = self.detectors.get((li, kind))
            if det is None:
                continue
            x = det.x
            Le = self.p.effective_length
            # front passes strictly beyond x during the step
            if p0 <= x < p1:
                tf = t + (x - p0) / vs
                det.open[v.id] = len(det.events)
                det.events.append([tf, None, max(tf - det.last_rear, 0.0)])
            if v.id in det.open and p0 <= x + Le < p1:
                tr = t + (x + Le - p0) / vs
                det.events[det.open.pop(v.id)][1] = tr
                det.last_rear = max(det.last_rear, tr)
            # occupancy measure within [t, t + dt]
            lo, hi = x - 1e-6, x + Le + 1e-6
            if vs == 0:
                occupied = self.p.dt if lo <= p0 <= hi else 0.0
            else:
                a, b = max(p0, lo), min(p1, hi)
                occupied = (b - a) / vs if b > a else 0.0
            if occupied > 0:
                key = (li, kind)
                sec = int(t + 1e-9)
                self._occ_buf.setdefault(key, {}).setdefault(sec, {})
                buf = self._occ_buf[key][sec]
                buf[v.id] = buf.get(v.id, 0.0) + occupied

    def _jam_length(self, vehicles, L) -> float:
        p = self.p
        if not vehicles:
            return 0.0
        first = vehicles[0]
        if not first.halted or L - first.pos > p.jam_gap:
            return 0.0
        rear = first.pos - p.effective_length
        for a, b in zip(vehicles, vehicles[1:]):
            if not b.halted or a.pos - p.effective_length - b.pos > p.jam_gap:
                break
            rear = b.pos - p.effective_length
        return L - rear

    def _lane_changes(self, entries, exits, sec):
        p = self.p
        Le = p.effective_length
        for link_id, idxs in self.link_lane_idx.items():
            if len(idxs) < 2 or self.net.links[link_id].kind == "exit":
                continue
            L = self.lane_objs[idxs[0]].length
            adv = L - self.net.detector_distance
            for li in idxs:
                for v in list(self.lanes[li]):
                    if self.lane_ok(v) or v.pos - Le <= adv + 1e-6:
                        continue
                    m = self.next_movement(v)
                    targets = sorted(
                        (j for j in idxs if m in self.lane_objs[j].movements),
                        key=lambda j: abs(self.lane_objs[j].index - self.lane_objs[li].index),
                    )
                    for tj in targets:
                        if self._gap_ok(v, tj):
                            self.lanes[li].remove(v)
                            self.lanes[tj].append(v)
                            self.lanes[tj].sort(key=lambda u: -u.pos)
                            exits[li, sec] += 1
                            entries[tj, sec] += 1
                            v.lane = tj
                            v.next_lane = None
                            v.halts_here = 0
                            v.amber = False
                            break

    def _gap_ok(self, v, tj) -> bool:
        Le = self.p.effective_length
        ahead = [u for u in self.lanes[tj] if u.pos >= v.pos]
        behind = [u for u in self.lanes[tj] if u.pos < v.pos]
        if ahead and ahead[-1].pos - Le - v.pos < 0:
            return False
        if behind:
            f = behind[0]
            need = 0.0 if v.speed < self.p.halt_speed else f.speed * self.p.dt
            if v.pos - Le - f.pos < need:
                return False
        return True

    def output(self) -> SimulationOutput:
        duration = self.duration
        started, jam, seen = self.started, self.jam, self.seen
        entries, exits, green = self.entries, self.exits, self.green
        n = len(self.lane_objs)
        arrays = {k: np.zeros((n, duration)) for k in (
            "stop_count", "stop_occupancy", "stop_speed",
            "adv_count", "adv_occupancy", "adv_speed")}
        events = {"stop": [np.zeros((0, 4))] * n, "adv": [np.zeros((0, 4))] * n}
        Le = self.p.effective_length
        for (li, kind), det in self.detectors.items():
            ev = []
            for tf, tr, tg in det.events:
                tr = tr if tr is not None else float(duration)
                t_o = max(tr - tf, 1e-9)
                ev.append((tf, t_o, tg, Le / t_o))
            ev = np.array(ev, dtype=float).reshape(-1, 4)
            events[kind] = list(events[kind])
            events[kind][li] = ev
            count = arrays[f"{kind}_count"][li]
            speed = arrays[f"{kind}_speed"][li]
            if len(ev):
                secs = np.minimum(ev[:, 0].astype(int), duration - 1)
                np.add.at(count, secs, 1)
                np.add.at(speed, secs, ev[:, 3])
                nz = count > 0
                speed[nz] /= count[nz]
            occ_arr = arrays[f"{kind}_occupancy"][li]
            for sec, per_vehicle in self._occ_buf.get((li, kind), {}).items():
                if sec < duration:
                    occ_arr[sec] = min(sum(per_vehicle.values()), 1.0)
        return SimulationOutput(
            lane_ids=self.net.lane_ids,
            duration=duration,
            seed=self.seed,
            arrival_rate=self.arrival_rate,
            tls_mode=next(iter(self.programs.values())).mode if self.programs else "simplified",
            network_digest=self.net.digest(),
            stop_count=arrays["stop_count"].astype(int),
            stop_occupancy=arrays["stop_occupancy"],
            stop_speed=arrays["stop_speed"],
            adv_count=arrays["adv_count"].astype(int),
            adv_occupancy=arrays["adv_occupancy"],
            adv_speed=arrays["adv_speed"],
            started_halts=started,
            max_jam=jam,
            n_veh_seen=seen,
            lane_entries=entries,
            lane_exits=exits,
            tls_green=green,
            section_count=self.section.copy(),
            stop_events=events["stop"],
            adv_events=events["adv"],
            multi_halt_vehicles=self.multi_halt.copy(),
            min_gap=self.min_gap if self.min_gap != math.inf else 0.0,
            entered=self.entered,
            exited=self.exited,
            on_network=sum(len(v) for v in self.lanes),
            params=self.p,
        )


def step_simulation(sim: Simulator) -> Simulator:
    sim.step()
    return sim


def run_simulation(
    network: RoadNetwork,
    tls_mode: str = "simplified",
    arrival_rate: float = 0.3,
    duration: int = 600,
    seed: int = 0,
    params: SimParams = SimParams(),
    programs: dict[str, TlsProgram] | None = None,
    trips: TripTable | None = None,
    green: float = 30.0,
) -> SimulationOutput:
    """Generate trips and simulate ``duration`` seconds."""
    if duration <= 0:
        raise ConfigError("duration must be positive")
    if programs is None:
        programs = default_programs(network, tls_mode, green)
    if trips is None:
        trips = generate_trips(network, arrival_rate, duration, seed)
    sim = Simulator(network, programs, trips, duration, params, seed)
    sim.arrival_rate = float(arrival_rate)
    out = sim.run()
    out.tls_mode = tls_mode
    return out


# --------------------------------------------------------------------------
# 1 Hz records


@dataclass(frozen=True)
class E1Record:
    time: int
    vehicle_count: int
    occupancy: float
    mean_speed: float
    events: tuple[tuple[float, float, float], ...]  # (t_o, t_g, speed)


@dataclass(frozen=True)
class E2Record:
    time: int
    started_halts: int
    max_jam_length: float
    n_veh_seen: int


def sample_e1(out: SimulationOutput, lane: int, detector: str, second: int) -> E1Record:
    ev = (out.stop_events if detector == "stop" else out.adv_events)[lane]
    sel = ev[(ev[:, 0] >= second) & (ev[:, 0] < second + 1)] if len(ev) else ev
    return E1Record(
        time=second,
        vehicle_count=int(getattr(out, f"{detector}_count")[lane, second]),
        occupancy=float(getattr(out, f"{detector}_occupancy")[lane, second]),
        mean_speed=float(getattr(out, f"{detector}_speed")[lane, second]),
        events=tuple((float(r[1]), float(r[2]), float(r[3])) for r in sel),
    )


def sample_e2(out: SimulationOutput, lane: int, second: int) -> E2Record:
    return E2Record(
        time=second,
        started_halts=int(out.started_halts[lane, second]),
        max_jam_length=float(out.max_jam[lane, second]),
        n_veh_seen=int(out.n_veh_seen[lane, second]),
    )


# --------------------------------------------------------------------------
# ground truth


def cycle_ground_truth(
    out: SimulationOutput, lane: int, mode: str = "halts"
) -> list[tuple[float, float]]:
    """Per-cycle maximum queue ``(time, metres)``.

    ``halts``: started halts summed over the cycle times the effective vehicle
    length (reliable without stop-and-go). ``jam``: maximum of the anchored
    halted-platoon length over the cycle. Each value is placed at the second
    where the platoon was longest.
    """
    if mode not in ("halts", "jam"):
        raise ValueError(f"unknown ground-truth mode {mode!r}")
    points = []
    for red, green, end in out.cycles(lane):
        a, b = int(red), int(end)
        seg = out.max_jam[lane, a:b]
        t_at = a + int(np.argmax(seg)) if seg.max() > 0 else int(green)
        if mode == "halts":
            value = float(out.started_halts[lane, a:b].sum()) * out.params.effective_length
        else:
            value = float(seg.max())
        points.append((float(t_at), value))
    return points


# --------------------------------------------------------------------------
# serialization

_STREAMS = {
    "e1.csv": ("stop_count", "stop_occupancy", "stop_speed", "adv_count", "adv_occupancy", "adv_speed"),
    "e2.csv": ("started_halts", "max_jam", "n_veh_seen", "lane_entries", "lane_exits", "section_count"),
    "tls.csv": ("tls_green",),
}


def save_output(out: SimulationOutput, directory) -> Path:
    """One CSV per stream plus ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lanes = out.lane_ids
    for name, fields in _STREAMS.items():
        with open(d / name, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "lane", *fields])
            arrays = [getattr(out, f) for f in fields]
            for li, lid in enumerate(lanes):
                for t in range(out.duration):
                    w.writerow([t, lid, *(_fmt(a[li, t]) for a in arrays)])
    with open(d / "e1_events.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "lane", "detector", "t_o", "t_g", "speed"])
        for kind, per_lane in (("stop", out.stop_events), ("adv", out.adv_events)):
            for li, ev in enumerate(per_lane):
                for row in ev:
                    w.writerow([repr(float(row[0])), lanes[li], kind, *(repr(float(x)) for x in row[1:])])
    with open(d / "cycles.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lane", "cycle", "red_start", "green_start", "end"])
        for li, lid in enumerate(lanes):
            for k, (r, g, e) in enumerate(out.cycles(li)):
                w.writerow([lid, k, r, g, e])
    manifest = {
        "format": "gdlqueue-run",
        "version": 1,
        "seed": out.seed,
        "arrival_rate": out.arrival_rate,
        "tls_mode": out.tls_mode,
        "network_digest": out.network_digest,
        "duration": out.duration,
        "lanes": lanes,
        "entered": out.entered,
        "exited": out.exited,
        "on_network": out.on_network,
        "min_gap": out.min_gap,
        "multi_halt_vehicles": out.multi_halt_vehicles.tolist(),
        "params": {k: getattr(out.params, k) for k in out.params.__dataclass_fields__},
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return d


def _fmt(x):
    x = float(x)
    return str(int(x)) if x.is_integer() else repr(x)


def load_output(directory) -> SimulationOutput:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    lanes = manifest["lanes"]
    index = {lid: i for i, lid in enumerate(lanes)}
    n, T = len(lanes), manifest["duration"]
    arrays = {}
    for name, fields in _STREAMS.items():
        df = pd.read_csv(d / name)
        li = df["lane"].map(index).to_numpy()
        t = df["time"].to_numpy()
        for f in fields:
            a = np.zeros((n, T))
            a[li, t] = df[f].to_numpy()
            arrays[f] = a
    ev = pd.read_csv(d / "e1_events.csv")
    events = {"stop": [np.zeros((0, 4)) for _ in lanes], "adv": [np.zeros((0, 4)) for _ in lanes]}
    for (lid, kind), g in ev.groupby(["lane", "detector"], sort=False):
        events[kind][index[lid]] = g[["time", "t_o", "t_g", "speed"]].to_numpy(dtype=float)
    ints = {
        "stop_count", "adv_count", "started_halts", "n_veh_seen",
        "lane_entries", "lane_exits", "tls_green", "section_count",
    }
    for k in ints:
        arrays[k] = arrays[k].astype(int)
    return SimulationOutput(
        lane_ids=lanes,
        duration=T,
        seed=manifest["seed"],
        arrival_rate=manifest["arrival_rate"],
        tls_mode=manifest["tls_mode"],
        network_digest=manifest["network_digest"],
        stop_events=events["stop"],
        adv_events=events["adv"],
        multi_halt_vehicles=np.array(manifest["multi_halt_vehicles"], dtype=int),
        min_gap=manifest["min_gap"],
        entered=manifest["entered"],
        exited=manifest["exited"],
        on_network=manifest["on_network"],
        params=SimParams(**manifest["params"]),
        **arrays,
    )
