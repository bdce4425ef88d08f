"""
Per-step heterogeneous state graph.

Node order is grouped by type: TSC, connection, lane, vehicle. Edges are
undirected: vehicle-lane, connection-entry lane, connection-exit lane and
connection-TSC.
"""
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from logger import setup_logger

logger = setup_logger("obsgraph")

NODE_TYPES = ("tsc", "connection", "lane", "vehicle")
FEATURE_DIMS = {"tsc": 1, "connection": 4, "lane": 1, "vehicle": 2}


@dataclass(frozen=True)
class FeatureScaling:
    tsc_seconds: float = 60.0
    lane_length: float = 300.0
    speed: float = 13.89

    @classmethod
    def from_config(cls, cfg):
        feats = cfg.get("features", {})
        return cls(tsc_seconds=feats.get("tsc_seconds_scale", 60.0),
                   lane_length=feats.get("lane_length_scale", 300.0),
                   speed=feats.get("speed_scale", 13.89))


@dataclass
class StateGraph:
    node_ids: list
    features: dict                      # node type -> (count, FEATURE_DIMS[type]) array
    edges: np.ndarray                   # (E, 2) undirected pairs, i < j
    a_hat: sp.csr_matrix
    tsc_ids: list
    vehicle_lane_length: np.ndarray     # per vehicle node, for position scaling
    focus: np.ndarray = None            # TSC rows the graph is about (None: all TSC rows)
    scaled: bool = False

    @property
    def n_nodes(self):
        return len(self.node_ids)

    def count(self, node_type):
        return self.features[node_type].shape[0]

    def offset(self, node_type):
        out = 0
        for t in NODE_TYPES:
            if t == node_type:
                return out
            out += self.count(t)
        raise KeyError(node_type)

    def rows(self, node_type):
        start = self.offset(node_type)
        return np.arange(start, start + self.count(node_type))

    @property
    def focus_rows(self):
        if self.focus is not None:
            return self.focus
        return self.rows("tsc")

    def index_of(self, node_id):
        return self.node_ids.index(node_id)

    def adjacency(self):
        n = self.n_nodes
        if len(self.edges) == 0:
            return sp.csr_matrix((n, n))
        rows = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
        cols = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
        data = np.ones(len(rows))
        return sp.csr_matrix((data, (rows, cols)), shape=(n, n))


@dataclass
class FailureModel:
    missing_probability: float = 0.0
    seed: int = 0
    rng: np.random.Generator = field(default=None, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.missing_probability <= 1.0:
            raise ValueError(f"missing_probability must be within [0, 1], got {self.missing_probability}")
        if self.rng is None:
            self.rng = np.random.default_rng(int(self.seed) & ((1 << 64) - 1))


def normalize_adjacency(A):
    """D^-1/2 (A + I) D^-1/2 with D the row sums of A + I."""
    A = sp.csr_matrix(A, dtype=float)
    n = A.shape[0]
    A_tilde = A + sp.identity(n, format="csr")
    degree = np.asarray(A_tilde.sum(axis=1)).ravel()
    inv_sqrt = sp.diags(1.0 / np.sqrt(degree))
    return (inv_sqrt @ A_tilde @ inv_sqrt).tocsr()


def build_state_graph(sim_state, network) -> StateGraph:
    """Raw (unscaled) features from the simulator state; a pure function of its inputs."""
    tsc_ids = list(network.tsc_ids)
    conn_ids = [c.id for c in network.connections]
    lane_ids = [l.id for l in network.lanes]
    veh_ids = sorted(sim_state.vehicles, key=lambda v: (len(v), v))

    offsets = {"tsc": 0}
    offsets["connection"] = len(tsc_ids)
    offsets["lane"] = offsets["connection"] + len(conn_ids)
    offsets["vehicle"] = offsets["lane"] + len(lane_ids)
    tsc_row = {t: i for i, t in enumerate(tsc_ids)}
    lane_row = {l: offsets["lane"] + i for i, l in enumerate(lane_ids)}

    x_tsc = np.array([[float(sim_state.seconds_in_phase[t])] for t in tsc_ids]).reshape(-1, 1)

    x_conn = np.zeros((len(conn_ids), 4))
    edges = []
    for i, conn_id in enumerate(conn_ids):
        conn = network.connection(conn_id)
        row = offsets["connection"] + i
        program = network.programs.get(conn.intersection_id)
        if program is not None:
            index = sim_state.phase_index[conn.intersection_id]
            phase = program.phases[index]
            switches, next_priority = program.next_opening(index, conn_id)
            x_conn[i] = [float(phase.is_open(conn_id)), float(phase.has_priority(conn_id)),
                         float(switches), float(next_priority)]
            edges.append((tsc_row[conn.intersection_id], row))
        edges.append((row, lane_row[conn.from_lane]))
        edges.append((row, lane_row[conn.to_lane]))

    x_lane = np.array([[network.lane(l).length] for l in lane_ids]).reshape(-1, 1)

    x_veh = np.zeros((len(veh_ids), 2))
    veh_lane_length = np.zeros(len(veh_ids))
    for i, vid in enumerate(veh_ids):
        veh = sim_state.vehicles[vid]
        x_veh[i] = [veh.speed, veh.lane_position]
        veh_lane_length[i] = network.lane(veh.lane).length
        edges.append((lane_row[veh.lane], offsets["vehicle"] + i))

    node_ids = ([f"tsc:{t}" for t in tsc_ids] + [f"connection:{c}" for c in conn_ids]
                + [f"lane:{l}" for l in lane_ids] + [f"vehicle:{v}" for v in veh_ids])
    edge_array = np.array(sorted((min(a, b), max(a, b)) for a, b in edges), dtype=int).reshape(-1, 2)
    graph = StateGraph(
        node_ids=node_ids,
        features={"tsc": x_tsc, "connection": x_conn, "lane": x_lane, "vehicle": x_veh},
        edges=edge_array,
        a_hat=None,
        tsc_ids=tsc_ids,
        vehicle_lane_length=veh_lane_length,
    )
    graph.a_hat = normalize_adjacency(graph.adjacency())
    return graph


def inject_failures(graph, failure_model) -> StateGraph:
    """Zero each vehicle's speed and position with probability p; topology untouched."""
    p = failure_model.missing_probability
    vehicles = graph.features["vehicle"]
    if p <= 0.0 or vehicles.shape[0] == 0:
        return graph
    faulty = failure_model.rng.random(vehicles.shape[0]) < p
    patched = vehicles.copy()
    patched[faulty] = 0.0
    features = dict(graph.features)
    features["vehicle"] = patched
    return replace(graph, features=features)


def scale_features(graph, scaling=None) -> StateGraph:
    if graph.scaled:
        return graph
    scaling = scaling or FeatureScaling()
    f = graph.features
    veh = f["vehicle"].copy()
    if veh.shape[0]:
        veh[:, 0] = veh[:, 0] / scaling.speed
        veh[:, 1] = veh[:, 1] / np.maximum(graph.vehicle_lane_length, 1e-9)
    features = {
        "tsc": f["tsc"] / scaling.tsc_seconds,
        "connection": f["connection"].copy(),
        "lane": f["lane"] / scaling.lane_length,
        "vehicle": veh,
    }
    return replace(graph, features=features, scaled=True)


def receptive_field(graph, row, hops):
    """Node rows within ``hops`` edges of ``row`` (sorted)."""
    A = graph.adjacency()
    reached = np.zeros(graph.n_nodes, dtype=bool)
    reached[row] = True
    frontier = reached.copy()
    for _ in range(hops):
        frontier = (A @ frontier.astype(float)) > 0
        frontier &= ~reached
        if not frontier.any():
            break
        reached |= frontier
    return np.flatnonzero(reached)


def local_masks(graph, hops):
    """Per-TSC boolean masks of the nodes inside each agent's receptive field."""
    masks = {}
    for tsc, row in zip(graph.tsc_ids, graph.rows("tsc")):
        mask = np.zeros(graph.n_nodes, dtype=bool)
        mask[receptive_field(graph, row, hops)] = True
        masks[tsc] = mask
    return masks


def subgraph(graph, tsc_id, hops) -> StateGraph:
    """Receptive-field subgraph of one TSC.

    Â is sliced from the full graph, so the TSC's embedding after ``hops``
    propagation layers equals its embedding on the full graph.
    """
    row = graph.rows("tsc")[graph.tsc_ids.index(tsc_id)]
    keep = receptive_field(graph, row, hops)
    keep_set = set(keep.tolist())
    remap = {old: new for new, old in enumerate(keep)}

    features = {}
    for node_type in NODE_TYPES:
        rows = graph.rows(node_type)
        local = [r - rows[0] for r in rows if r in keep_set] if len(rows) else []
        features[node_type] = graph.features[node_type][local].reshape(-1, FEATURE_DIMS[node_type])

    veh_rows = graph.rows("vehicle")
    veh_local = [r - veh_rows[0] for r in veh_rows if r in keep_set] if len(veh_rows) else []
    tsc_local = [graph.tsc_ids[r] for r in graph.rows("tsc") if r in keep_set]

    mask = np.isin(graph.edges[:, 0], keep) & np.isin(graph.edges[:, 1], keep) if len(graph.edges) else np.zeros(0, bool)
    edges = np.array([(remap[a], remap[b]) for a, b in graph.edges[mask]], dtype=int).reshape(-1, 2)

    return StateGraph(
        node_ids=[graph.node_ids[r] for r in keep],
        features=features,
        edges=edges,
        a_hat=graph.a_hat[keep][:, keep].tocsr(),
        tsc_ids=tsc_local,
        vehicle_lane_length=graph.vehicle_lane_length[veh_local],
        focus=np.array([remap[row]]),
        scaled=graph.scaled,
    )


def batch_graphs(graphs) -> StateGraph:
    """Block-diagonal union, regrouped by node type; focus rows follow input order."""
    features = {t: np.concatenate([g.features[t] for g in graphs]).reshape(-1, FEATURE_DIMS[t]) for t in NODE_TYPES}

    # position of every input node in the regrouped order
    type_base = {}
    start = 0
    for t in NODE_TYPES:
        type_base[t] = start
        start += features[t].shape[0]
    n_total = start

    perm = np.empty(n_total, dtype=int)  # perm[new] = old (block-diagonal) index
    new_of_old = np.empty(n_total, dtype=int)
    seen = {t: 0 for t in NODE_TYPES}
    old_base = 0
    focus = []
    node_ids = [None] * n_total
    for k, g in enumerate(graphs):
        for t in NODE_TYPES:
            rows = g.rows(t)
            for r in rows:
                new = type_base[t] + seen[t]
                seen[t] += 1
                perm[new] = old_base + r
                new_of_old[old_base + r] = new
                node_ids[new] = f"{k}/{g.node_ids[r]}"
        focus.extend(new_of_old[old_base + g.focus_rows].tolist())
        old_base += g.n_nodes

    block = sp.block_diag([g.a_hat for g in graphs], format="csr")
    a_hat = block[perm][:, perm].tocsr()
    edges = np.concatenate([g.edges + off for g, off in zip(graphs, np.cumsum([0] + [g.n_nodes for g in graphs[:-1]]))])
    edges = new_of_old[edges] if len(edges) else edges.reshape(-1, 2)
    return StateGraph(
        node_ids=node_ids,
        features=features,
        edges=np.sort(edges, axis=1).reshape(-1, 2),
        a_hat=a_hat,
        tsc_ids=[f"{k}/{t}" for k, g in enumerate(graphs) for t in g.tsc_ids],
        vehicle_lane_length=np.concatenate([g.vehicle_lane_length for g in graphs]),
        focus=np.array(focus, dtype=int),
        scaled=all(g.scaled for g in graphs),
    )


def graph_to_dict(graph):
    return {
        "nodes": [{"id": nid} for nid in graph.node_ids],
        "features": {t: graph.features[t].round(6).tolist() for t in NODE_TYPES},
        "edges": graph.edges.tolist(),
        "tsc_ids": list(graph.tsc_ids),
        "scaled": graph.scaled,
    }
