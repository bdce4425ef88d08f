"""
Discrete-time microscopic traffic simulator (one step = one second).

Vehicles follow a simplified Krauss rule:

    v <- min(v + a*dt, s_v*, s_l, v_safe(gap, v_leader, b))

and never move further than the free gap ahead of them, which keeps the
lane order intact. A closed connection acts as a standing obstacle at the
stop line. Trips that cannot enter their source lane wait in a backlog and
only count as departed once inserted.
"""
import hashlib
import math
from collections import deque
from dataclasses import dataclass, field

import networkx as nx
import numpy as np

from logger import setup_logger

logger = setup_logger("simcore")

PROLONG = 0
SWITCH = 1
DT = 1.0
QUEUE_GAP_TOLERANCE = 0.1  # m, free gap a queued vehicle may still have


@dataclass(frozen=True)
class SimParams:
    accel: float = 2.6
    decel: float = 4.5
    spacing: float = 7.5          # vehicle length + minimum gap
    standing_speed: float = 0.1
    auto_clearance: bool = True   # clearance phases end by themselves

    @classmethod
    def from_config(cls, cfg):
        sim = cfg.get("sim", {})
        return cls(accel=sim.get("accel", 2.6), decel=sim.get("decel", 4.5),
                   spacing=sim.get("spacing", 7.5), standing_speed=sim.get("standing_speed", 0.1))


@dataclass
class Vehicle:
    id: str
    route: tuple
    depart_time: int
    max_speed: float
    route_index: int = 0
    lane_position: float = 0.0
    speed: float = 0.0

    @property
    def lane(self):
        return self.route[self.route_index]


@dataclass(frozen=True)
class Trip:
    vehicle_id: str
    depart_step: int
    route: tuple
    max_speed: float


@dataclass
class TripSchedule:
    departures: dict
    horizon: int
    period: float
    seed: int
    regime_length: int
    origin_weights: list
    destination_weights: list
    sources: list
    sinks: list
    surge_start: int = None
    surge_factor: float = 1.0

    def departures_at(self, step):
        return self.departures.get(step, [])

    def weights_at(self, step):
        block = step // self.regime_length
        return self.origin_weights[block], self.destination_weights[block]

    def counts(self):
        out = np.zeros(self.horizon, dtype=int)
        for step, trips in self.departures.items():
            out[step] = len(trips)
        return out

    @property
    def total(self):
        return sum(len(trips) for trips in self.departures.values())

    def fingerprint(self):
        digest = hashlib.sha256()
        for step in sorted(self.departures):
            for trip in self.departures[step]:
                digest.update(f"{step}:{trip.vehicle_id}:{'>'.join(trip.route)}:{trip.max_speed};".encode())
        return digest.hexdigest()


@dataclass
class SimState:
    clock: int = 0
    vehicles: dict = field(default_factory=dict)       # in-network vehicles by id
    lane_queues: dict = field(default_factory=dict)    # lane id -> vehicle ids, front (stop line) first
    phase_index: dict = field(default_factory=dict)
    seconds_in_phase: dict = field(default_factory=dict)
    departed: int = 0
    arrived: list = field(default_factory=list)        # (vehicle id, depart step, arrival step)
    waiting: dict = field(default_factory=dict)        # source lane -> backlog of Trips

    def check_conservation(self):
        return self.departed == len(self.vehicles) + len(self.arrived)


@dataclass
class MetricsFrame:
    step: int
    delay: float
    queues: dict
    requested_switches: int
    executed_switches: int
    masked_switches: int
    arrivals: int
    vehicles: int
    n_tsc: int

    @property
    def total_queue(self):
        return int(sum(self.queues.values()))

    def as_row(self):
        return {"step": self.step, "sum_delay": self.delay, "sum_queue": self.total_queue,
                "switches": self.executed_switches, "requested_switches": self.requested_switches,
                "masked_switches": self.masked_switches, "arrivals": self.arrivals, "vehicles": self.vehicles}


# ─────────────────────────────────────────────────────────────────────────────
# Trip generation

def _route_table(network):
    """Shortest lane routes from every source lane to every reachable sink lane."""
    graph = network.lane_graph
    sinks = set(network.sink_lanes)
    table = {}
    for source in network.source_lanes:
        origin_node = network.lane(source).from_node
        paths = nx.single_source_dijkstra_path(graph, source, weight="weight")
        table[source] = {
            sink: tuple(path) for sink, path in paths.items()
            if sink in sinks and network.lane(sink).to_node != origin_node
        }
    return table


def generate_trips(network, period, horizon, seed, regime_length=120, binomial_trials=4, max_speed=15.0,
                   surge_start=None, surge_factor=2.0) -> TripSchedule:
    """Binomial departures with mean 1/period per step; origin/destination weights change every block."""
    if not period > 0:
        raise ValueError(f"period must be positive, got {period}")
    if horizon < 1:
        raise ValueError(f"horizon must be at least 1 step, got {horizon}")
    if regime_length < 1:
        raise ValueError("regime_length must be at least 1 step")

    sources = list(network.source_lanes)
    sinks = list(network.sink_lanes)
    if not sources or not sinks:
        raise ValueError(f"Network {network.name} has no sources or sinks")

    routes = _route_table(network)
    live = [i for i, source in enumerate(sources) if routes[source]]
    if not live:
        raise ValueError(f"Network {network.name} has no source lane that reaches a sink")
    if len(live) < len(sources):
        dead = [sources[i] for i in range(len(sources)) if i not in live]
        logger.warning(f"{len(dead)} source lane(s) reach no sink and get no departures: {dead[:5]}")
    sink_index = {sink: i for i, sink in enumerate(sinks)}

    rng = np.random.default_rng(int(seed) & ((1 << 64) - 1))
    blocks = math.ceil(horizon / regime_length)
    origin_weights = [rng.dirichlet(np.ones(len(sources))) for _ in range(blocks)]
    destination_weights = [rng.dirichlet(np.ones(len(sinks))) for _ in range(blocks)]

    base_rate = 1.0 / period
    peak_rate = base_rate * (surge_factor if surge_start is not None else 1.0)
    trials = max(int(binomial_trials), math.ceil(peak_rate))

    departures = {}
    counter = 0
    for step in range(horizon):
        rate = base_rate
        if surge_start is not None and step >= surge_start:
            rate = base_rate * surge_factor
        count = int(rng.binomial(trials, min(1.0, rate / trials)))
        if count == 0:
            continue
        ow, dw = origin_weights[step // regime_length], destination_weights[step // regime_length]
        origin_p = ow[live] / ow[live].sum()
        trips = []
        for _ in range(count):
            origin = sources[live[int(rng.choice(len(live), p=origin_p))]]
            reachable = list(routes[origin])
            w = np.array([dw[sink_index[s]] for s in reachable])
            w = w / w.sum()
            destination = reachable[int(rng.choice(len(reachable), p=w))]
            trips.append(Trip(vehicle_id=f"v{counter}", depart_step=step,
                              route=routes[origin][destination], max_speed=float(max_speed)))
            counter += 1
        departures[step] = trips

    schedule = TripSchedule(departures=departures, horizon=int(horizon), period=float(period), seed=int(seed),
                            regime_length=int(regime_length), origin_weights=origin_weights,
                            destination_weights=destination_weights, sources=sources, sinks=sinks,
                            surge_start=surge_start, surge_factor=float(surge_factor) if surge_start is not None else 1.0)
    logger.debug(f"Generated {schedule.total} trips over {horizon} steps (period={period}, seed={seed}).")
    return schedule


# ─────────────────────────────────────────────────────────────────────────────
# Metrics

def compute_delay(state, network):
    """Sum over vehicles of (s*_v - s_vt) / s*_v with s*_v = min(s_v*, s_l)."""
    total = 0.0
    for veh in state.vehicles.values():
        reachable = min(veh.max_speed, network.lane(veh.lane).speed_limit)
        if reachable <= 0:
            continue
        term = (reachable - veh.speed) / reachable
        total += min(1.0, max(0.0, term))
    return total


def lane_queue(state, lane, params=None):
    """Standing vehicles contiguous from the stop line, capped at lane capacity.

    The first standing vehicle must be within one spacing (plus ``QUEUE_GAP_TOLERANCE``)
    of the stop line; a blocked exit lane can hold it up to one vehicle length short.
    Every further one must stand within the same distance of the vehicle ahead. A
    moving vehicle or a larger gap ends the queue.
    """
    params = params or SimParams()
    reach = params.spacing + QUEUE_GAP_TOLERANCE
    q = 0
    ahead = lane.length
    for vid in state.lane_queues.get(lane.id, ()):
        veh = state.vehicles[vid]
        if veh.speed >= params.standing_speed or ahead - veh.lane_position > reach:
            break
        q += 1
        ahead = veh.lane_position
    return min(q, int(lane.length // params.spacing))


def compute_queues(state, network, params=None):
    queues = {}
    for tsc in network.tsc_ids:
        for lane_id in network.inbound_lanes(tsc):
            queues[(tsc, lane_id)] = lane_queue(state, network.lane(lane_id), params)
    return queues


def reward(state, network, tsc_id, params=None):
    """r_i = - sum of queue lengths over the intersection's inbound lanes."""
    if not network.has_intersection(tsc_id):
        raise KeyError(f"Unknown traffic signal controller {tsc_id}")
    return -float(sum(lane_queue(state, network.lane(l), params) for l in network.inbound_lanes(tsc_id)))


def rewards_from_queues(queues, network):
    out = {tsc: 0.0 for tsc in network.tsc_ids}
    for (tsc, _), q in queues.items():
        out[tsc] -= q
    return out


def travel_times(state):
    return [(vid, arrive - depart) for vid, depart, arrive in state.arrived]


def stopped_and_moving(state, network, tsc_id, params=None):
    params = params or SimParams()
    stopped = moving = 0
    for lane_id in network.inbound_lanes(tsc_id):
        for vid in state.lane_queues.get(lane_id, ()):
            if state.vehicles[vid].speed < params.standing_speed:
                stopped += 1
            else:
                moving += 1
    return stopped, moving


# ─────────────────────────────────────────────────────────────────────────────
# Simulation

def initial_state(network):
    state = SimState()
    for lane in network.lanes:
        state.lane_queues[lane.id] = []
    for lane_id in network.source_lanes:
        state.waiting[lane_id] = deque()
    for tsc in network.tsc_ids:
        state.phase_index[tsc] = 0
        state.seconds_in_phase[tsc] = 0
    return state


class Simulator:
    """Owns one SimState; single-threaded."""

    def __init__(self, network, schedule=None, params=None):
        self.network = network
        self.schedule = schedule
        self.params = params or SimParams()
        self.state = initial_state(network)
        self.horizon = schedule.horizon if schedule is not None else None
        self._lane_order = sorted(lane.id for lane in network.lanes)
        self._tscs = list(network.tsc_ids)

    # -- signals ---------------------------------------------------------------
    def _normalize_actions(self, actions):
        pairs = list(actions.items()) if isinstance(actions, dict) else list(actions)
        seen = {}
        for tsc, action in pairs:
            if tsc in seen:
                raise ValueError(f"Duplicate action for traffic signal controller {tsc}")
            if tsc not in self.state.phase_index:
                raise ValueError(f"Unknown traffic signal controller {tsc}")
            if action not in (PROLONG, SWITCH):
                raise ValueError(f"Action for {tsc} must be 0 (prolong) or 1 (switch), got {action}")
            seen[tsc] = int(action)
        missing = set(self._tscs) - set(seen)
        if missing:
            raise ValueError(f"No action for traffic signal controller(s) {sorted(missing)}")
        return seen

    def _update_signals(self, actions):
        """Apply switch/prolong requests; returns (requested, executed, masked) green switches.

        ``seconds_in_phase`` counts the steps the current phase has been active,
        including the step it started in: a switch sets it to 1 (the clock "reset
        to 0" plus the step just taken), so a TSC that switched k steps ago reads k.
        A switch request is honored once ``seconds_in_phase >= min_duration``.
        """
        requested = executed = masked = 0
        state = self.state
        for tsc in self._tscs:
            program = self.network.programs[tsc]
            index = state.phase_index[tsc]
            elapsed = state.seconds_in_phase[tsc]
            green = program.is_green(index)
            wants = actions[tsc] == SWITCH
            change = False
            if wants and elapsed >= program.min_duration(index):
                change = True
            elif wants:
                masked += 1
            elif not green and self.params.auto_clearance and elapsed >= program.clearance_duration:
                change = True
            if green:
                requested += int(wants)
                executed += int(change)
            if change:
                # the new phase is already active during this step
                state.phase_index[tsc] = program.advance(index)
                state.seconds_in_phase[tsc] = 1
            else:
                state.seconds_in_phase[tsc] = elapsed + 1
        return requested, executed, masked

    # -- car following -----------------------------------------------------------
    def _safe_speed(self, speed, leader_speed, gap):
        if math.isinf(gap):
            return math.inf
        mean_speed = (speed + leader_speed) / 2.0
        return leader_speed + (gap - leader_speed * DT) / (mean_speed / self.params.decel + DT)

    def _front_gap(self, veh, lane, tail, entry_tail):
        """Gap ahead of the first vehicle on a lane: (gap, leader speed, next lane, may cross)."""
        if veh.route_index == len(veh.route) - 1:
            return math.inf, 0.0, None, True
        next_id = veh.route[veh.route_index + 1]
        conn = self.network.connection_between(lane.id, next_id)
        to_stop_line = lane.length - veh.lane_position
        if conn is None:
            return to_stop_line, 0.0, next_id, False
        program = self.network.programs[conn.intersection_id]
        if not program.phases[self.state.phase_index[conn.intersection_id]].is_open(conn.id):
            return to_stop_line, 0.0, next_id, False

        candidates = [v for v in (tail.get(next_id), entry_tail.get(next_id)) if v is not None]
        if candidates:
            back, leader_speed = min(candidates, key=lambda item: item[0])
            return to_stop_line + back, leader_speed, next_id, True
        next_lane = self.network.lane(next_id)
        return to_stop_line + next_lane.length, next_lane.speed_limit, next_id, True

    def _move_vehicles(self):
        state, params = self.state, self.params
        spacing = params.spacing

        # (back position, speed) of the last vehicle per lane; only ever moves forward
        tail = {}
        for lane_id, queue in state.lane_queues.items():
            if queue:
                last = state.vehicles[queue[-1]]
                tail[lane_id] = (last.lane_position - spacing, last.speed)
        entry_tail = {}
        transfers = []
        arrivals = 0

        for lane_id in self._lane_order:
            queue = state.lane_queues[lane_id]
            if not queue:
                continue
            lane = self.network.lane(lane_id)
            kept = []
            leader = None  # (back, speed) of the vehicle ahead on this lane
            for vid in queue:
                veh = state.vehicles[vid]
                limit = min(veh.max_speed, lane.speed_limit)
                if leader is not None:
                    gap = leader[0] - veh.lane_position
                    leader_speed, next_id, may_cross = leader[1], None, False
                else:
                    gap, leader_speed, next_id, may_cross = self._front_gap(veh, lane, tail, entry_tail)

                speed = min(veh.speed + params.accel * DT, limit, self._safe_speed(veh.speed, leader_speed, gap))
                speed = max(0.0, min(speed, max(gap, 0.0) / DT))
                position = veh.lane_position + speed * DT

                if leader is None and may_cross and position >= lane.length:
                    veh.speed = speed
                    if next_id is None:
                        del state.vehicles[vid]
                        state.arrived.append((vid, veh.depart_time, state.clock + 1))
                        arrivals += 1
                    else:
                        entry = position - lane.length
                        transfers.append((vid, next_id, entry))
                        entry_tail[next_id] = (entry - spacing, speed)
                    continue

                veh.lane_position = min(position, lane.length)
                veh.speed = speed
                kept.append(vid)
                leader = (veh.lane_position - spacing, speed)

            state.lane_queues[lane_id] = kept
            if kept:
                tail[lane_id] = leader
            else:
                tail.pop(lane_id, None)

        for vid, next_id, entry in transfers:
            veh = state.vehicles[vid]
            veh.route_index += 1
            veh.lane_position = entry
            veh.speed = min(veh.speed, veh.max_speed, self.network.lane(next_id).speed_limit)
            state.lane_queues[next_id].append(vid)
        return arrivals

    # -- insertion -------------------------------------------------------------
    def _insert_departures(self):
        state = self.state
        if self.schedule is not None:
            for trip in self.schedule.departures_at(state.clock):
                state.waiting[trip.route[0]].append(trip)
        for lane_id, backlog in state.waiting.items():
            if not backlog:
                continue
            queue = state.lane_queues[lane_id]
            if queue and state.vehicles[queue[-1]].lane_position - self.params.spacing < 0:
                continue
            trip = backlog.popleft()
            state.vehicles[trip.vehicle_id] = Vehicle(id=trip.vehicle_id, route=trip.route,
                                                      depart_time=state.clock, max_speed=trip.max_speed)
            queue.append(trip.vehicle_id)
            state.departed += 1

    def step(self, actions):
        """Advance one second; returns (state, MetricsFrame)."""
        if self.horizon is not None and self.state.clock >= self.horizon:
            raise RuntimeError(f"Simulation horizon of {self.horizon} steps already reached")
        actions = self._normalize_actions(actions)
        requested, executed, masked = self._update_signals(actions)
        arrivals = self._move_vehicles()
        self._insert_departures()

        frame = MetricsFrame(
            step=self.state.clock,
            delay=compute_delay(self.state, self.network),
            queues=compute_queues(self.state, self.network, self.params),
            requested_switches=requested,
            executed_switches=executed,
            masked_switches=masked,
            arrivals=arrivals,
            vehicles=len(self.state.vehicles),
            n_tsc=len(self._tscs),
        )
        self.state.clock += 1
        return self.state, frame

    @property
    def done(self):
        return self.horizon is not None and self.state.clock >= self.horizon
