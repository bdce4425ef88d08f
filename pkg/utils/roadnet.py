"""
Static road-network model and the synthetic network generators.

A network is a set of signalized intersections joined by directed roads.
Every road carries ``lanes_per_route`` parallel lanes; lane ``k`` of an
inbound road connects to lane ``k`` of every outbound road except the one
heading back (no U-turns). Boundary nodes terminate stub roads: a stub
road into the network is a source, a stub road out of it is a sink.
"""
import json
import math
from dataclasses import dataclass
from functools import cached_property

import networkx as nx
import numpy as np

from config import NETWORK_FORMAT_VERSION
from logger import setup_logger

logger = setup_logger("roadnet")

SPEED_LIMIT = 13.89
MIN_LANE_LENGTH = 100.0
MAX_LANE_LENGTH = 300.0
TRAIN_MIN_INTERSECTIONS = 2
TRAIN_MAX_INTERSECTIONS = 10
MAX_LANES_PER_ROUTE = 4
MIN_LEGS = 3

GREEN = "green"
CLEARANCE = "clearance"


class NetworkGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Lane:
    id: str
    road: str
    index: int
    from_node: str
    to_node: str
    length: float
    speed_limit: float = SPEED_LIMIT
    successors: tuple = ()
    kind: str = "internal"

    def __post_init__(self):
        if not self.length > 0:
            raise ValueError(f"Lane {self.id} must have a positive length, got {self.length}")
        if not self.speed_limit > 0:
            raise ValueError(f"Lane {self.id} must have a positive speed limit, got {self.speed_limit}")


@dataclass(frozen=True)
class Connection:
    id: str
    from_lane: str
    to_lane: str
    intersection_id: str
    turn: str = "straight"
    approach: float = 0.0  # bearing of the inbound road, seen from the intersection

    def __post_init__(self):
        if self.from_lane == self.to_lane:
            raise ValueError(f"Connection {self.id} links lane {self.from_lane} to itself")


@dataclass(frozen=True)
class Intersection:
    id: str
    x: float
    y: float
    incoming: tuple = ()
    outgoing: tuple = ()
    connections: tuple = ()
    signalized: bool = True


@dataclass(frozen=True)
class Phase:
    open: frozenset = frozenset()
    priority: frozenset = frozenset()
    kind: str = GREEN

    def is_open(self, conn_id):
        return conn_id in self.open

    def has_priority(self, conn_id):
        return conn_id in self.priority


@dataclass(frozen=True)
class PhaseProgram:
    intersection_id: str
    phases: tuple
    min_phase_duration: int = 5
    clearance_duration: int = 2

    def __post_init__(self):
        if len(self.phases) < 2:
            raise ValueError(f"Program of {self.intersection_id} needs at least 2 phases")
        if self.min_phase_duration < 1:
            raise ValueError("min_phase_duration must be at least 1 s")
        if self.clearance_duration < 1:
            raise ValueError("clearance_duration must be at least 1 s")

    def __len__(self):
        return len(self.phases)

    def advance(self, index):
        return (index + 1) % len(self.phases)

    def min_duration(self, index):
        if self.phases[index].kind == CLEARANCE:
            return self.clearance_duration
        return self.min_phase_duration

    def is_green(self, index):
        return self.phases[index].kind == GREEN

    def controllable(self):
        opened = set()
        for phase in self.phases:
            opened |= phase.open
        return opened

    def next_opening(self, index, conn_id):
        """Switches needed (assuming no further prolongs matter) until ``conn_id`` opens.

        Returns ``(k, priority)``; ``k == 0`` when the connection is open now.
        A connection the program never opens reports ``(len(phases), False)``.
        """
        n = len(self.phases)
        for k in range(n):
            phase = self.phases[(index + k) % n]
            if phase.is_open(conn_id):
                return k, phase.has_priority(conn_id)
        return n, False


class RoadNetwork:
    """Immutable road network; lookups are built once at construction."""

    def __init__(self, intersections, lanes, connections, programs, boundaries=(), name="network", meta=None):
        self.intersections = list(intersections)
        self.lanes = list(lanes)
        self.connections = list(connections)
        self.programs = dict(programs)
        self.boundaries = list(boundaries)
        self.name = name
        self.meta = dict(meta or {})

        self._lanes = {lane.id: lane for lane in self.lanes}
        self._connections = {conn.id: conn for conn in self.connections}
        self._intersections = {node.id: node for node in self.intersections}
        self._by_pair = {(c.from_lane, c.to_lane): c for c in self.connections}

    def lane(self, lane_id) -> Lane:
        return self._lanes[lane_id]

    def connection(self, conn_id) -> Connection:
        return self._connections[conn_id]

    def intersection(self, node_id) -> Intersection:
        return self._intersections[node_id]

    def has_lane(self, lane_id):
        return lane_id in self._lanes

    def has_intersection(self, node_id):
        return node_id in self._intersections

    def connection_between(self, from_lane, to_lane):
        return self._by_pair.get((from_lane, to_lane))

    @property
    def tsc_ids(self):
        return [node.id for node in self.intersections if node.signalized]

    @cached_property
    def source_lanes(self):
        return [lane.id for lane in self.lanes if lane.kind == "source"]

    @cached_property
    def sink_lanes(self):
        return [lane.id for lane in self.lanes if lane.kind == "sink"]

    def inbound_lanes(self, tsc_id):
        return list(self._intersections[tsc_id].incoming)

    @cached_property
    def lane_graph(self) -> nx.DiGraph:
        graph = nx.DiGraph()
        for lane in self.lanes:
            graph.add_node(lane.id, length=lane.length)
        for conn in self.connections:
            graph.add_edge(conn.from_lane, conn.to_lane, connection=conn.id,
                           weight=self._lanes[conn.to_lane].length)
        return graph

    def __repr__(self):
        return (f"RoadNetwork(name={self.name!r}, intersections={len(self.intersections)}, "
                f"lanes={len(self.lanes)}, connections={len(self.connections)})")


# ─────────────────────────────────────────────────────────────────────────────
# Geometry helpers

def _bearing(x0, y0, x1, y1):
    return math.atan2(y1 - y0, x1 - x0) % (2 * math.pi)


def _wrap(angle):
    """Wrap into (-pi, pi]."""
    angle = (angle + math.pi) % (2 * math.pi) - math.pi
    return math.pi if angle == -math.pi else angle


def _turn_kind(heading_in, heading_out):
    diff = _wrap(heading_out - heading_in)
    if abs(diff) < math.pi / 4:
        return "straight"
    return "left" if diff > 0 else "right"


def _axis_distance(a, b):
    d = abs((a % math.pi) - (b % math.pi))
    return min(d, math.pi - d)


# ─────────────────────────────────────────────────────────────────────────────
# Signal programs

def default_program(intersection, connections, min_phase_duration=5, clearance_duration=2):
    """Alternate green between the intersection's approach groups.

    Approaches are split by axis: those within 45 degrees of the first
    approach's axis form one group, the rest the other. Each green is
    followed by an all-red clearance phase. Left turns yield (no priority)
    when an opposing approach shares the green.
    """
    own = [c for c in connections if c.intersection_id == intersection.id]
    if not own:
        raise ValueError(f"Intersection {intersection.id} has no controllable connections")

    approaches = {}
    for conn in sorted(own, key=lambda c: (c.from_lane, c.to_lane)):
        road = conn.from_lane.rsplit("_", 1)[0]
        approaches.setdefault(road, conn.approach)
    reference = next(iter(approaches.values()))
    group_of = {
        road: 0 if _axis_distance(angle, reference) < math.pi / 4 else 1
        for road, angle in approaches.items()
    }

    phases = []
    for group in (0, 1):
        members = [c for c in own if group_of[c.from_lane.rsplit("_", 1)[0]] == group]
        if not members:
            continue
        roads = {c.from_lane.rsplit("_", 1)[0] for c in members}
        opposed = len(roads) > 1
        opened = frozenset(c.id for c in members)
        priority = frozenset(c.id for c in members if not (opposed and c.turn == "left"))
        phases.append(Phase(open=opened, priority=priority, kind=GREEN))
        phases.append(Phase(kind=CLEARANCE))

    return PhaseProgram(
        intersection_id=intersection.id,
        phases=tuple(phases),
        min_phase_duration=int(min_phase_duration),
        clearance_duration=int(clearance_duration),
    )


# ─────────────────────────────────────────────────────────────────────────────
# Builder shared by both generators

class _NetworkBuilder:
    def __init__(self, lanes_per_route, speed_limit):
        self.lanes_per_route = int(lanes_per_route)
        self.speed_limit = float(speed_limit)
        self.nodes = {}      # id -> (x, y, signalized)
        self.roads = []      # (from, to, length)

    def add_node(self, node_id, x, y, signalized):
        self.nodes[node_id] = (round(float(x), 3), round(float(y), 3), signalized)

    def add_road(self, a, b, length):
        self.roads.append((a, b, round(float(length), 3)))

    def add_two_way(self, a, b, length):
        self.add_road(a, b, length)
        self.add_road(b, a, length)

    def build(self, name, meta, min_phase_duration, clearance_duration):
        lanes_of_road = {}
        lane_records = {}
        for a, b, length in self.roads:
            road_id = f"{a}-{b}"
            a_sig, b_sig = self.nodes[a][2], self.nodes[b][2]
            if a_sig and b_sig:
                kind = "internal"
            elif b_sig:
                kind = "source"
            else:
                kind = "sink"
            lanes_of_road[road_id] = []
            for k in range(self.lanes_per_route):
                lane_id = f"{road_id}_{k}"
                lanes_of_road[road_id].append(lane_id)
                lane_records[lane_id] = dict(id=lane_id, road=road_id, index=k, from_node=a, to_node=b,
                                             length=length, speed_limit=self.speed_limit, kind=kind)

        inbound = {node: [] for node in self.nodes}
        outbound = {node: [] for node in self.nodes}
        for a, b, _ in self.roads:
            outbound[a].append((a, b))
            inbound[b].append((a, b))

        connections = []
        successors = {lane_id: [] for lane_id in lane_records}
        conn_of_node = {node: [] for node in self.nodes}
        counter = 0
        for node_id in sorted(self.nodes):
            x, y, signalized = self.nodes[node_id]
            if not signalized:
                continue
            for u, _ in sorted(inbound[node_id]):
                ux, uy, _ = self.nodes[u]
                heading_in = _bearing(ux, uy, x, y)
                approach = _bearing(x, y, ux, uy)
                for _, w in sorted(outbound[node_id]):
                    if w == u:
                        continue
                    wx, wy, _ = self.nodes[w]
                    turn = _turn_kind(heading_in, _bearing(x, y, wx, wy))
                    for k in range(self.lanes_per_route):
                        from_lane = f"{u}-{node_id}_{k}"
                        to_lane = f"{node_id}-{w}_{k}"
                        conn = Connection(id=f"c{counter}", from_lane=from_lane, to_lane=to_lane,
                                          intersection_id=node_id, turn=turn, approach=round(approach, 6))
                        counter += 1
                        connections.append(conn)
                        successors[from_lane].append(conn.id)
                        conn_of_node[node_id].append(conn.id)

        lanes = [Lane(successors=tuple(successors[lid]), **rec) for lid, rec in sorted(lane_records.items())]

        intersections, boundaries = [], []
        for node_id in sorted(self.nodes):
            x, y, signalized = self.nodes[node_id]
            node = Intersection(
                id=node_id, x=x, y=y,
                incoming=tuple(l for a, b in sorted(inbound[node_id]) for l in lanes_of_road[f"{a}-{b}"]),
                outgoing=tuple(l for a, b in sorted(outbound[node_id]) for l in lanes_of_road[f"{a}-{b}"]),
                connections=tuple(conn_of_node[node_id]),
                signalized=signalized,
            )
            (intersections if signalized else boundaries).append(node)

        programs = {
            node.id: default_program(node, connections, min_phase_duration, clearance_duration)
            for node in intersections
        }
        return RoadNetwork(intersections, lanes, connections, programs, boundaries, name=name, meta=meta)


# ─────────────────────────────────────────────────────────────────────────────
# Generators

def _check_lanes_per_route(lanes_per_route):
    if not 1 <= int(lanes_per_route) <= MAX_LANES_PER_ROUTE:
        raise ValueError(f"lanes_per_route must be within [1, {MAX_LANES_PER_ROUTE}], got {lanes_per_route}")


def generate_grid_network(rows, cols, lanes_per_route=1, edge_length=150.0, speed_limit=SPEED_LIMIT,
                          min_phase_duration=5, clearance_duration=2) -> RoadNetwork:
    """Rectangular lattice of rows x cols signalized intersections.

    Lattice rule: every intersection gets one boundary stub (a two-way road
    to a boundary node) per missing lattice neighbour, so a grid has
    2 * (rows + cols) stubs.
    """
    if rows < 2 or cols < 2:
        raise ValueError(f"Grid dimensions must be at least 2x2, got {rows}x{cols}")
    _check_lanes_per_route(lanes_per_route)
    if not MIN_LANE_LENGTH <= edge_length <= MAX_LANE_LENGTH:
        raise ValueError(f"edge_length must be within [{MIN_LANE_LENGTH}, {MAX_LANE_LENGTH}] m")

    builder = _NetworkBuilder(lanes_per_route, speed_limit)
    for r in range(rows):
        for c in range(cols):
            builder.add_node(f"I{r}_{c}", c * edge_length, -r * edge_length, True)

    stubs = 0
    for r in range(rows):
        for c in range(cols):
            node = f"I{r}_{c}"
            if c + 1 < cols:
                builder.add_two_way(node, f"I{r}_{c + 1}", edge_length)
            if r + 1 < rows:
                builder.add_two_way(node, f"I{r + 1}_{c}", edge_length)
            for dr, dc, missing in ((-1, 0, r == 0), (1, 0, r == rows - 1), (0, -1, c == 0), (0, 1, c == cols - 1)):
                if not missing:
                    continue
                stub = f"B{stubs}"
                stubs += 1
                builder.add_node(stub, (c + dc) * edge_length, -(r + dr) * edge_length, False)
                builder.add_two_way(node, stub, edge_length)

    meta = {"kind": "grid", "rows": int(rows), "cols": int(cols), "lanes_per_route": int(lanes_per_route)}
    network = builder.build(f"grid{rows}x{cols}", meta, min_phase_duration, clearance_duration)
    logger.info(f"Generated grid network {rows}x{cols}: {len(network.intersections)} intersections, "
                f"{len(network.boundaries)} boundary stubs, {len(network.lanes)} lanes.")
    return network


def _stub_angles(existing, count):
    """Bearings for new legs, each placed in the middle of the widest free gap."""
    angles = sorted(a % (2 * math.pi) for a in existing)
    new = []
    for _ in range(count):
        if not angles:
            choice = 0.0
        else:
            best_gap, choice = -1.0, 0.0
            for i, a in enumerate(angles):
                b = angles[(i + 1) % len(angles)] + (2 * math.pi if i + 1 == len(angles) else 0.0)
                if b - a > best_gap:
                    best_gap, choice = b - a, (a + (b - a) / 2) % (2 * math.pi)
        new.append(choice)
        angles = sorted(angles + [choice])
    return new


def generate_random_network(seed, n_intersections, lanes_per_route=1, allow_large=False, speed_limit=SPEED_LIMIT,
                            min_phase_duration=5, clearance_duration=2, max_attempts=200) -> RoadNetwork:
    """Irregular network: random placement, nearest-neighbour wiring, disconnected samples rejected.

    Road lengths are the Euclidean distances clipped into [100, 300] m.
    Intersections with fewer than three legs receive boundary stubs.
    """
    n = int(n_intersections)
    if n < TRAIN_MIN_INTERSECTIONS:
        raise ValueError(f"A random network needs at least {TRAIN_MIN_INTERSECTIONS} intersections, got {n}")
    if n > TRAIN_MAX_INTERSECTIONS and not allow_large:
        raise ValueError(f"Training networks have at most {TRAIN_MAX_INTERSECTIONS} intersections, got {n} "
                         f"(pass allow_large=True to override)")
    _check_lanes_per_route(lanes_per_route)

    # Local import: the validator only needs the network interface defined above.
    from utils.validator import validate_network

    rng = np.random.default_rng(int(seed) & ((1 << 64) - 1))
    side = 200.0 * math.sqrt(n)
    for attempt in range(max_attempts):
        points = rng.uniform(0.0, side, size=(n, 2))
        dist = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=-1)
        np.fill_diagonal(dist, np.inf)
        if dist.min() < 50.0:
            continue

        graph = nx.Graph()
        graph.add_nodes_from(range(n))
        k = min(2, n - 1)
        for i in range(n):
            for j in np.argsort(dist[i], kind="stable")[:k]:
                graph.add_edge(i, int(j))
        if not nx.is_connected(graph):
            continue

        builder = _NetworkBuilder(lanes_per_route, speed_limit)
        for i in range(n):
            builder.add_node(f"I{i}", points[i, 0], points[i, 1], True)
        for i, j in sorted(graph.edges()):
            length = float(np.clip(dist[i, j], MIN_LANE_LENGTH, MAX_LANE_LENGTH))
            builder.add_two_way(f"I{min(i, j)}", f"I{max(i, j)}", length)

        stubs = 0
        for i in range(n):
            need = MIN_LEGS - graph.degree[i]
            if need <= 0:
                continue
            existing = [_bearing(points[i, 0], points[i, 1], points[j, 0], points[j, 1]) for j in graph.neighbors(i)]
            for angle in _stub_angles(existing, need):
                length = float(rng.uniform(MIN_LANE_LENGTH, MAX_LANE_LENGTH))
                stub = f"B{stubs}"
                stubs += 1
                builder.add_node(stub, points[i, 0] + length * math.cos(angle),
                                 points[i, 1] + length * math.sin(angle), False)
                builder.add_two_way(f"I{i}", stub, length)

        meta = {"kind": "random", "seed": int(seed), "n_intersections": n,
                "lanes_per_route": int(lanes_per_route), "attempts": attempt + 1}
        network = builder.build(f"random{n}_s{seed}", meta, min_phase_duration, clearance_duration)
        issues = validate_network(network)
        if issues:
            logger.debug(f"Rejected random network sample {attempt}: {issues[:3]}")
            continue
        logger.info(f"Generated random network with {n} intersections after {attempt + 1} attempt(s).")
        return network

    raise NetworkGenerationError(f"No valid random network with {n} intersections after {max_attempts} attempts")


# ─────────────────────────────────────────────────────────────────────────────
# Serialization

def network_to_dict(network: RoadNetwork) -> dict:
    return {
        "format": "rglight-network",
        "version": NETWORK_FORMAT_VERSION,
        "name": network.name,
        "meta": network.meta,
        "intersections": [
            {"id": n.id, "x": n.x, "y": n.y, "incoming": list(n.incoming), "outgoing": list(n.outgoing),
             "connections": list(n.connections)}
            for n in network.intersections
        ],
        "boundaries": [{"id": n.id, "x": n.x, "y": n.y} for n in network.boundaries],
        "lanes": [
            {"id": l.id, "road": l.road, "index": l.index, "from": l.from_node, "to": l.to_node,
             "length": l.length, "speed_limit": l.speed_limit, "kind": l.kind, "successors": list(l.successors)}
            for l in network.lanes
        ],
        "connections": [
            {"id": c.id, "from_lane": c.from_lane, "to_lane": c.to_lane, "intersection": c.intersection_id,
             "turn": c.turn, "approach": c.approach}
            for c in network.connections
        ],
        "programs": {
            tsc: {
                "min_phase_duration": p.min_phase_duration,
                "clearance_duration": p.clearance_duration,
                "phases": [{"kind": ph.kind, "open": sorted(ph.open), "priority": sorted(ph.priority)}
                           for ph in p.phases],
            }
            for tsc, p in sorted(network.programs.items())
        },
    }


def network_from_dict(doc: dict) -> RoadNetwork:
    if doc.get("format") != "rglight-network":
        raise ValueError("Not a network document (missing format tag 'rglight-network')")
    if doc.get("version") != NETWORK_FORMAT_VERSION:
        raise ValueError(f"Unsupported network format version {doc.get('version')}")

    lanes = [Lane(id=l["id"], road=l["road"], index=l["index"], from_node=l["from"], to_node=l["to"],
                  length=l["length"], speed_limit=l["speed_limit"], kind=l["kind"],
                  successors=tuple(l["successors"])) for l in doc["lanes"]]
    connections = [Connection(id=c["id"], from_lane=c["from_lane"], to_lane=c["to_lane"],
                              intersection_id=c["intersection"], turn=c.get("turn", "straight"),
                              approach=c.get("approach", 0.0)) for c in doc["connections"]]
    intersections = [Intersection(id=n["id"], x=n.get("x", 0.0), y=n.get("y", 0.0),
                                  incoming=tuple(n["incoming"]), outgoing=tuple(n["outgoing"]),
                                  connections=tuple(n["connections"])) for n in doc["intersections"]]
    boundaries = [Intersection(id=n["id"], x=n.get("x", 0.0), y=n.get("y", 0.0), signalized=False)
                  for n in doc.get("boundaries", [])]
    programs = {
        tsc: PhaseProgram(
            intersection_id=tsc,
            phases=tuple(Phase(open=frozenset(ph["open"]), priority=frozenset(ph["priority"]), kind=ph["kind"])
                         for ph in p["phases"]),
            min_phase_duration=p["min_phase_duration"],
            clearance_duration=p["clearance_duration"],
        )
        for tsc, p in doc["programs"].items()
    }
    return RoadNetwork(intersections, lanes, connections, programs, boundaries,
                       name=doc.get("name", "network"), meta=doc.get("meta"))


def serialize_network(network: RoadNetwork) -> str:
    return json.dumps(network_to_dict(network), sort_keys=True, indent=2)
