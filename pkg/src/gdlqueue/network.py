"""Grid road networks, lane graphs and the adjacency matrix fed to graph attention.

A grid of ``rows x cols`` signalized intersections is connected by pairs of
opposing links. Every border intersection additionally gets one entry and one
exit link per open side ("fringe" links); vehicles appear and disappear only
at the far ends of those.

Lanes are the graph nodes. A directed edge ``i -> j`` exists when a vehicle on
lane ``i`` may cross the downstream intersection and continue on lane ``j``.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HEADINGS = ("N", "E", "S", "W")
# grid offsets (drow, dcol) when travelling in a heading; row 0 is the north edge
_STEP = {"N": (-1, 0), "E": (0, 1), "S": (1, 0), "W": (0, -1)}
MOVEMENTS = ("right", "straight", "left")


class InvalidGeometry(ValueError):
    pass


def turn(heading: str, movement: str) -> str:
    """Heading after performing ``movement`` (right-hand traffic)."""
    i = HEADINGS.index(heading)
    return HEADINGS[(i + {"straight": 0, "right": 1, "left": 3}[movement]) % 4]


def movement_between(heading_in: str, heading_out: str) -> str | None:
    """Inverse of :func:`turn`; ``None`` for a U-turn."""
    d = (HEADINGS.index(heading_out) - HEADINGS.index(heading_in)) % 4
    return {0: "straight", 1: "right", 3: "left"}.get(d)


def lane_movements(index: int, lane_count: int) -> frozenset[str]:
    """Movements permitted on lane ``index`` (0 = rightmost) of a link."""
    if lane_count == 1:
        return frozenset(MOVEMENTS)
    if lane_count == 2:
        return frozenset({"right", "straight"} if index == 0 else {"straight", "left"})
    if index == 0:
        return frozenset({"right"})
    if index == lane_count - 1:
        return frozenset({"left"})
    return frozenset({"straight"})


@dataclass(frozen=True)
class Link:
    id: str
    from_node: str
    to_node: str
    heading: str
    length: float
    lane_count: int
    kind: str  # "internal" | "entry" | "exit"


@dataclass(frozen=True)
class Lane:
    id: str
    link: str
    index: int
    length: float
    heading: str
    junction: str | None  # signalized intersection at the downstream end
    movements: frozenset[str]

    @property
    def is_approach(self) -> bool:
        return self.junction is not None


@dataclass
class RoadNetwork:
    rows: int
    cols: int
    lane_length: float
    lanes_per_direction: int
    detector_distance: float
    intersections: list[list[str]]
    links: dict[str, Link]
    tls_program_ids: dict[str, str]
    lanes: list[Lane] = field(default_factory=list)

    def __post_init__(self):
        if not self.lanes:
            self.lanes = _ordered_lanes(self)
        self._lane_index = {lane.id: i for i, lane in enumerate(self.lanes)}
        self._out_links: dict[str, dict[str, Link]] = {}
        for link in self.links.values():
            self._out_links.setdefault(link.from_node, {})[link.heading] = link

    # lookups -------------------------------------------------------------
    @property
    def lane_ids(self) -> list[str]:
        return [lane.id for lane in self.lanes]

    def lane(self, lane_id: str) -> Lane:
        return self.lanes[self._lane_index[lane_id]]

    def lane_index(self, lane_id: str) -> int:
        return self._lane_index[lane_id]

    def link_lanes(self, link_id: str) -> list[Lane]:
        link = self.links[link_id]
        return [self.lane(f"{link_id}_{k}") for k in range(link.lane_count)]

    def out_link(self, node: str, heading: str) -> Link | None:
        return self._out_links.get(node, {}).get(heading)

    def next_link(self, link_id: str, movement: str) -> Link | None:
        link = self.links[link_id]
        if link.kind == "exit":
            return None
        return self.out_link(link.to_node, turn(link.heading, movement))

    @property
    def entry_links(self) -> list[Link]:
        return [l for l in self.links.values() if l.kind == "entry"]

    @property
    def exit_links(self) -> list[Link]:
        return [l for l in self.links.values() if l.kind == "exit"]

    @property
    def approach_lanes(self) -> list[Lane]:
        return [lane for lane in self.lanes if lane.is_approach]

    def detector_layout(self) -> dict[str, dict[str, float]]:
        """Per approach lane, detector offsets in metres upstream of the stop bar."""
        return {
            lane.id: {"stop_bar": 0.0, "advanced": self.detector_distance}
            for lane in self.approach_lanes
        }

    # serialization -------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "cols": self.cols,
            "lane_length": self.lane_length,
            "lanes_per_direction": self.lanes_per_direction,
            "detector_distance": self.detector_distance,
            "intersections": self.intersections,
            "tls_program_ids": self.tls_program_ids,
            "links": [
                {
                    "id": l.id,
                    "from": l.from_node,
                    "to": l.to_node,
                    "heading": l.heading,
                    "length": l.length,
                    "lane_count": l.lane_count,
                    "kind": l.kind,
                }
                for l in self.links.values()
            ],
            "detectors": self.detector_layout(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RoadNetwork":
        links = {
            l["id"]: Link(
                l["id"], l["from"], l["to"], l["heading"], float(l["length"]),
                int(l["lane_count"]), l["kind"],
            )
            for l in d["links"]
        }
        return cls(
            rows=d["rows"],
            cols=d["cols"],
            lane_length=float(d["lane_length"]),
            lanes_per_direction=d["lanes_per_direction"],
            detector_distance=float(d["detector_distance"]),
            intersections=d["intersections"],
            links=links,
            tls_program_ids=d["tls_program_ids"],
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "RoadNetwork":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _junction_id(r: int, c: int) -> str:
    return f"J{r}_{c}"


def _junction_rc(node: str) -> tuple[int, int]:
    r, c = node[1:].split("_")
    return int(r), int(c)


def _lane_sort_key(net: RoadNetwork, lane: Lane):
    link = net.links[lane.link]
    if lane.is_approach:
        r, c = _junction_rc(link.to_node)
        kind = 0
    else:
        r, c = _junction_rc(link.from_node)
        kind = 1
    return (r, c, kind, HEADINGS.index(lane.heading), lane.index)


def _ordered_lanes(net: RoadNetwork) -> list[Lane]:
    lanes = []
    for link in net.links.values():
        junction = link.to_node if link.kind != "exit" else None
        for k in range(link.lane_count):
            lanes.append(
                Lane(
                    id=f"{link.id}_{k}",
                    link=link.id,
                    index=k,
                    length=link.length,
                    heading=link.heading,
                    junction=junction,
                    movements=lane_movements(k, link.lane_count),
                )
            )
    lanes.sort(key=lambda lane: _lane_sort_key(net, lane))
    return lanes


def build_grid_network(
    rows: int,
    cols: int,
    lane_length: float,
    lanes_per_direction: int,
    detector_distance: float = 122.0,
) -> RoadNetwork:
    """Grid of signalized intersections with fringe entry/exit links on every open side.

    Fringe links have the same length as internal links.
    """
    if rows < 1 or cols < 1 or lanes_per_direction < 1:
        raise InvalidGeometry("rows, cols and lanes_per_direction must be >= 1")
    if not lane_length > detector_distance > 0:
        raise InvalidGeometry(
            f"lane length {lane_length} must exceed detector distance {detector_distance} > 0"
        )
    K = lanes_per_direction
    links: dict[str, Link] = {}

    def add(frm, to, heading, kind):
        lid = f"{frm}>{to}"
        links[lid] = Link(lid, frm, to, heading, float(lane_length), K, kind)

    for r in range(rows):
        for c in range(cols):
            j = _junction_id(r, c)
            for h in HEADINGS:
                dr, dc = _STEP[h]
                rr, cc = r + dr, c + dc
                if 0 <= rr < rows and 0 <= cc < cols:
                    add(j, _junction_id(rr, cc), h, "internal")
                else:
                    # open side: a fringe node beyond the border
                    fringe = f"F{h}{r}_{c}"
                    add(j, fringe, h, "exit")
                    add(fringe, j, HEADINGS[(HEADINGS.index(h) + 2) % 4], "entry")

    intersections = [[_junction_id(r, c) for c in range(cols)] for r in range(rows)]
    tls = {j: f"tls_{j}" for row in intersections for j in row}
    return RoadNetwork(
        rows=rows,
        cols=cols,
        lane_length=float(lane_length),
        lanes_per_direction=K,
        detector_distance=float(detector_distance),
        intersections=intersections,
        links=links,
        tls_program_ids=tls,
    )


@dataclass(frozen=True)
class LaneGraph:
    nodes: tuple[str, ...]
    edges: frozenset[tuple[str, str]]

    @property
    def n(self) -> int:
        return len(self.nodes)

    def out_neighbors(self, lane_id: str) -> set[str]:
        return {j for i, j in self.edges if i == lane_id}


def lane_graph(network: RoadNetwork) -> LaneGraph:
    """Directed lane-to-lane movement graph; no lane-change or self edges."""
    edges = set()
    for lane in network.approach_lanes:
        for m in lane.movements:
            nxt = network.next_link(lane.link, m)
            if nxt is None:
                continue
            for target in network.link_lanes(nxt.id):
                edges.add((lane.id, target.id))
    return LaneGraph(nodes=tuple(network.lane_ids), edges=frozenset(edges))


def adjacency_matrix(graph: LaneGraph) -> np.ndarray:
    """Binary N x N matrix of out-edges plus the identity."""
    if graph.n < 1:
        raise ValueError("graph has no nodes")
    index = {lane: i for i, lane in enumerate(graph.nodes)}
    A = np.eye(graph.n, dtype=np.float64)
    for i, j in graph.edges:
        A[index[i], index[j]] = 1.0
    return A


def save_adjacency_csv(A: np.ndarray, path, lane_ids=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if lane_ids is not None:
            w.writerow(["lane", *lane_ids])
            for lid, row in zip(lane_ids, A):
                w.writerow([lid, *(int(v) for v in row)])
        else:
            for row in A:
                w.writerow([int(v) for v in row])
