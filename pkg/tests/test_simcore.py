import numpy as np
import pytest

from utils.agents import FixedTimePolicy
from utils.obsgraph import build_state_graph
from utils.roadnet import generate_random_network
from utils.simcore import (PROLONG, SWITCH, SimParams, Simulator, Vehicle, compute_delay, generate_trips,
                           initial_state, lane_queue, reward, stopped_and_moving, travel_times)


def _all(network, action):
    return {tsc: action for tsc in network.tsc_ids}


def _place(state, vid, route, position=0.0, speed=0.0, max_speed=15.0):
    state.vehicles[vid] = Vehicle(id=vid, route=tuple(route), depart_time=state.clock, max_speed=max_speed,
                                  lane_position=position, speed=speed)
    state.lane_queues[route[0]].append(vid)
    state.departed += 1


def _closed_source_connection(network):
    for conn in network.connections:
        if conn.from_lane in network.source_lanes and not network.programs[conn.intersection_id].phases[0].is_open(conn.id):
            return conn
    raise AssertionError("grid has no connection closed in phase 0")


def test_empty_network_has_no_delay_or_queue(grid2):
    sim = Simulator(grid2)
    for _ in range(10):
        state, frame = sim.step(_all(grid2, PROLONG))
        assert frame.delay == 0.0
        assert frame.total_queue == 0
        assert state.check_conservation()


def test_vehicle_waits_at_red_then_crosses(grid2):
    conn = _closed_source_connection(grid2)
    sim = Simulator(grid2)
    _place(sim.state, "v0", (conn.from_lane, conn.to_lane), position=100.0, speed=10.0)
    length = grid2.lane(conn.from_lane).length
    for _ in range(40):
        state, _ = sim.step(_all(grid2, PROLONG))
        veh = state.vehicles["v0"]
        assert veh.lane == conn.from_lane
        assert veh.lane_position <= length
    assert veh.speed < SimParams().standing_speed
    assert reward(sim.state, grid2, conn.intersection_id) == -1.0

    # green -> clearance -> the other green, which opens the connection
    actions = _all(grid2, PROLONG)
    actions[conn.intersection_id] = SWITCH
    sim.step(actions)
    for _ in range(20):
        state, _ = sim.step(_all(grid2, PROLONG))
    assert "v0" not in state.vehicles or state.vehicles["v0"].lane == conn.to_lane


def test_min_green_masks_early_switch(grid2):
    sim = Simulator(grid2)
    _, frame = sim.step(_all(grid2, SWITCH))
    assert frame.requested_switches == 4
    assert frame.masked_switches == 4
    assert frame.executed_switches == 0
    for _ in range(4):
        sim.step(_all(grid2, PROLONG))
    _, frame = sim.step(_all(grid2, SWITCH))
    assert frame.executed_switches == 4
    assert all(i == 1 for i in sim.state.phase_index.values())



def test_seconds_in_phase_counts_the_switch_step(grid2):
    sim = Simulator(grid2, params=SimParams(auto_clearance=False))
    for k in range(1, 6):
        sim.step(_all(grid2, PROLONG))
        assert sim.state.seconds_in_phase["I0_0"] == k
    sim.step(_all(grid2, SWITCH))
    assert sim.state.phase_index["I0_0"] == 1
    assert sim.state.seconds_in_phase["I0_0"] == 1
    for k in range(3):
        sim.step(_all(grid2, PROLONG))
    assert sim.state.seconds_in_phase["I0_0"] == 4
    graph = build_state_graph(sim.state, grid2)
    assert graph.features["tsc"][:, 0].tolist() == [4.0] * 4

def test_clearance_advances_by_itself(grid2):
    sim = Simulator(grid2)
    for _ in range(5):
        sim.step(_all(grid2, PROLONG))
    sim.step(_all(grid2, SWITCH))
    assert sim.state.phase_index["I0_0"] == 1
    sim.step(_all(grid2, PROLONG))
    sim.step(_all(grid2, PROLONG))
    assert sim.state.phase_index["I0_0"] == 2


def test_fixed_time_request_schedule(grid2):
    sim = Simulator(grid2)
    policy = FixedTimePolicy(grid2, green_duration=30)
    requests = []
    for clock in range(70):
        actions = policy.act(sim.state, grid2)
        if actions["I0_0"] == SWITCH:
            requests.append(clock)
        sim.step(actions)
    assert requests == [30, 32, 62, 64]


def test_invariants_under_random_control(grid2):
    params = SimParams()
    schedule = generate_trips(grid2, period=2.0, horizon=300, seed=3)
    sim = Simulator(grid2, schedule, params)
    rng = np.random.default_rng(0)
    for _ in range(300):
        before = {vid: veh.lane for vid, veh in sim.state.vehicles.items()}
        actions = {tsc: int(rng.integers(2)) for tsc in grid2.tsc_ids}
        state, frame = sim.step(actions)
        assert state.check_conservation()
        for vid, old_lane in before.items():
            veh = state.vehicles.get(vid)
            if veh is None or veh.lane == old_lane:
                continue
            conn = grid2.connection_between(old_lane, veh.lane)
            phase = grid2.programs[conn.intersection_id].phases[state.phase_index[conn.intersection_id]]
            assert phase.is_open(conn.id)
        for lane_id, queue in state.lane_queues.items():
            length = grid2.lane(lane_id).length
            positions = [state.vehicles[v].lane_position for v in queue]
            assert all(0.0 <= p <= length for p in positions)
            assert all(a - b >= params.spacing - 1e-6 for a, b in zip(positions, positions[1:]))
        assert frame.vehicles == len(state.vehicles)
    assert state.departed > 0


def test_delay_terms(grid2):
    state = initial_state(grid2)
    lane = grid2.source_lanes[0]
    _place(state, "stopped", (lane,), position=10.0, speed=0.0)
    assert compute_delay(state, grid2) == pytest.approx(1.0)
    state.vehicles["stopped"].speed = grid2.lane(lane).speed_limit
    assert compute_delay(state, grid2) == pytest.approx(0.0)


def _standing_queue(state, lane_id, length, speeds, gap=0.05):
    """Vehicles from the stop line back, bumper to bumper (spacing + ``gap`` apart)."""
    position = length - gap
    for i, speed in enumerate(speeds):
        _place(state, f"{lane_id}/{i}", (lane_id,), position=position, speed=speed)
        position -= SimParams().spacing + gap


def test_queue_counts_contiguous_standing_vehicles(grid2):
    state = initial_state(grid2)
    lane_id = grid2.source_lanes[0]
    lane = grid2.lane(lane_id)
    _standing_queue(state, lane_id, lane.length, [0.0, 0.0, 5.0, 0.0])
    assert lane_queue(state, lane) == 2

    state = initial_state(grid2)
    _standing_queue(state, lane_id, lane.length, [0.0, 0.0, 0.0, 4.0])
    assert lane_queue(state, lane) == 3

    state = initial_state(grid2)
    _standing_queue(state, lane_id, lane.length, [4.0, 4.0, 4.0])
    assert lane_queue(state, lane) == 0


def test_queue_must_start_at_stop_line(grid2):
    lane_id = grid2.source_lanes[0]
    lane = grid2.lane(lane_id)

    state = initial_state(grid2)
    _place(state, "mid", (lane_id,), position=10.0, speed=0.0)
    assert lane_queue(state, lane) == 0

    # a just-inserted vehicle stands at the lane start
    state = initial_state(grid2)
    _place(state, "fresh", (lane_id,), position=0.0, speed=0.0)
    assert lane_queue(state, lane) == 0

    # moving vehicle at the stop line, stopped one further back
    state = initial_state(grid2)
    _place(state, "mover", (lane_id,), position=lane.length - 1.0, speed=6.0)
    _place(state, "stopped", (lane_id,), position=lane.length - 40.0, speed=0.0)
    assert lane_queue(state, lane) == 0

    # standing vehicles with a gap between them
    state = initial_state(grid2)
    _place(state, "front", (lane_id,), position=lane.length - 0.05, speed=0.0)
    _place(state, "behind", (lane_id,), position=lane.length - 30.0, speed=0.0)
    assert lane_queue(state, lane) == 1


def test_queue_is_capped_at_lane_capacity(grid2):
    state = initial_state(grid2)
    lane_id = grid2.source_lanes[0]
    lane = grid2.lane(lane_id)
    assert lane.length == 150.0
    _standing_queue(state, lane_id, lane.length, [0.0] * 21, gap=0.0)
    assert lane_queue(state, lane) == int(lane.length // SimParams().spacing)


def test_reward_sums_inbound_queues(grid2):
    state = initial_state(grid2)
    assert reward(state, grid2, "I0_0") == 0.0
    first, second = grid2.inbound_lanes("I0_0")[:2]
    _standing_queue(state, first, grid2.lane(first).length, [0.0, 0.0])
    _standing_queue(state, second, grid2.lane(second).length, [0.0, 0.0, 0.0])
    assert reward(state, grid2, "I0_0") == -5.0


def test_reward_unknown_tsc(grid2):
    with pytest.raises(KeyError):
        reward(initial_state(grid2), grid2, "nope")


def test_stopped_and_moving(grid2):
    state = initial_state(grid2)
    lane_id = grid2.inbound_lanes("I0_0")[0]
    for i, speed in enumerate([0.0, 0.0, 0.0, 4.0, 4.0]):
        _place(state, f"v{i}", (lane_id,), position=140.0 - 10 * i, speed=speed)
    assert stopped_and_moving(state, grid2, "I0_0") == (3, 2)


def test_actions_are_validated(grid2):
    sim = Simulator(grid2)
    with pytest.raises(ValueError):
        sim.step({"I0_0": PROLONG})
    actions = _all(grid2, PROLONG)
    actions["I0_0"] = 2
    with pytest.raises(ValueError):
        sim.step(actions)


def test_horizon_is_enforced(grid2):
    sim = Simulator(grid2, generate_trips(grid2, period=4.0, horizon=3, seed=0))
    for _ in range(3):
        sim.step(_all(grid2, PROLONG))
    assert sim.done
    with pytest.raises(RuntimeError):
        sim.step(_all(grid2, PROLONG))


def test_trips_are_deterministic_per_seed(grid2):
    a = generate_trips(grid2, period=4.0, horizon=500, seed=11)
    b = generate_trips(grid2, period=4.0, horizon=500, seed=11)
    c = generate_trips(grid2, period=4.0, horizon=500, seed=12)
    assert a.fingerprint() == b.fingerprint()
    assert a.fingerprint() != c.fingerprint()


def test_trip_rate_matches_period(grid2):
    totals = [generate_trips(grid2, period=4.0, horizon=4000, seed=s).total for s in range(3)]
    assert abs(np.mean(totals) - 1000) < 100


def test_trip_routes_run_source_to_sink(grid2):
    schedule = generate_trips(grid2, period=2.0, horizon=300, seed=5)
    for trips in schedule.departures.values():
        for trip in trips:
            assert trip.route[0] in grid2.source_lanes
            assert trip.route[-1] in grid2.sink_lanes
            for a, b in zip(trip.route, trip.route[1:]):
                assert grid2.connection_between(a, b) is not None


def test_surge_raises_departure_rate(grid2):
    schedule = generate_trips(grid2, period=4.0, horizon=2000, seed=2, surge_start=1000, surge_factor=2.0)
    counts = schedule.counts()
    assert counts[1000:].mean() > 1.5 * counts[:1000].mean()


def test_bad_period(grid2):
    with pytest.raises(ValueError):
        generate_trips(grid2, period=0.0, horizon=10, seed=0)


def test_regime_weights_change_every_block(grid2):
    schedule = generate_trips(grid2, period=4.0, horizon=360, seed=7)
    origin_119, dest_119 = schedule.weights_at(119)
    origin_120, dest_120 = schedule.weights_at(120)
    origin_239, dest_239 = schedule.weights_at(239)
    assert not np.allclose(origin_119, origin_120)
    assert not np.allclose(dest_119, dest_120)
    np.testing.assert_array_equal(origin_120, origin_239)
    np.testing.assert_array_equal(dest_120, dest_239)


def test_departure_mean_is_one_over_period(grid2):
    light = generate_trips(grid2, period=4.0, horizon=60_000, seed=21)
    heavy = generate_trips(grid2, period=2.0, horizon=60_000, seed=21)
    assert light.counts().mean() == pytest.approx(0.25, abs=0.01)
    assert heavy.counts().mean() == pytest.approx(0.5, abs=0.01)
    assert heavy.total / light.total == pytest.approx(2.0, abs=0.1)


def test_unreachable_source_gets_no_departures(grid2, monkeypatch):
    from logger import get_log_stream
    from utils import simcore

    dead = grid2.source_lanes[0]
    original = simcore._route_table

    def without_dead(network):
        table = original(network)
        table[dead] = {}
        return table

    monkeypatch.setattr(simcore, "_route_table", without_dead)
    schedule = generate_trips(grid2, period=2.0, horizon=10_000, seed=4)
    assert all(trip.route[0] != dead for trips in schedule.departures.values() for trip in trips)
    assert schedule.counts().mean() == pytest.approx(0.5, abs=0.03)
    assert "reach no sink" in get_log_stream().getvalue()


def _open_source_connections(network):
    return [conn for conn in network.connections
            if conn.from_lane in network.source_lanes
            and network.programs[conn.intersection_id].phases[0].is_open(conn.id)]


def test_one_step_from_rest_on_green(grid2):
    by_lane = {conn.from_lane: conn for conn in _open_source_connections(grid2)}
    first, second = [by_lane[lane] for lane in sorted(by_lane)[:2]]
    sim = Simulator(grid2)
    _place(sim.state, "fast", (first.from_lane, first.to_lane))
    _place(sim.state, "slow", (second.from_lane, second.to_lane), max_speed=1.0)

    state, _ = sim.step(_all(grid2, PROLONG))
    accel = SimParams().accel
    expected = min(accel * 1.0, 15.0, grid2.lane(first.from_lane).speed_limit)
    assert state.vehicles["fast"].speed == pytest.approx(expected)
    assert state.vehicles["fast"].lane_position == pytest.approx(expected)
    assert state.vehicles["slow"].speed == pytest.approx(1.0)
    assert state.vehicles["slow"].lane_position == pytest.approx(1.0)


def test_travel_times(grid2):
    state = initial_state(grid2)
    assert travel_times(state) == []
    state.arrived.append(("done", 10, 110))
    _place(state, "driving", (grid2.source_lanes[0],), position=20.0, speed=5.0)
    assert travel_times(state) == [("done", 100)]


def test_queues_grow_under_frozen_red(grid2):
    schedule = generate_trips(grid2, period=4.0, horizon=150, seed=9)
    sim = Simulator(grid2, schedule, SimParams(auto_clearance=False))
    for tsc in grid2.tsc_ids:
        sim.state.phase_index[tsc] = 1   # all-red clearance, held by prolonging
    totals = []
    while not sim.done:
        state, frame = sim.step(_all(grid2, PROLONG))
        assert all(state.phase_index[t] == 1 for t in grid2.tsc_ids)
        totals.append(frame.total_queue)
    assert all(b >= a for a, b in zip(totals, totals[1:]))
    assert totals[-1] > 0
    assert not state.arrived


def _check_step(network, params, before_lane, before_phase, before_elapsed, state):
    assert state.check_conservation()
    for vid, old_lane in before_lane.items():
        veh = state.vehicles.get(vid)
        if veh is None or veh.lane == old_lane:
            continue
        conn = network.connection_between(old_lane, veh.lane)
        assert conn is not None
        phase = network.programs[conn.intersection_id].phases[state.phase_index[conn.intersection_id]]
        assert phase.is_open(conn.id)
    for lane_id, queue in state.lane_queues.items():
        length = network.lane(lane_id).length
        positions = [state.vehicles[v].lane_position for v in queue]
        assert all(0.0 <= p <= length for p in positions)
        assert all(a - b >= params.spacing - 1e-6 for a, b in zip(positions, positions[1:]))
    for tsc, index in before_phase.items():
        program = network.programs[tsc]
        if state.phase_index[tsc] != index and program.is_green(index):
            assert before_elapsed[tsc] >= program.min_phase_duration


@pytest.mark.slow
def test_random_control_on_random_networks():
    params = SimParams()
    rng = np.random.default_rng(2024)
    for run in range(100):
        network = generate_random_network(seed=run, n_intersections=int(rng.integers(2, 7)))
        schedule = generate_trips(network, period=float(rng.uniform(1.0, 6.0)), horizon=1000, seed=run)
        sim = Simulator(network, schedule, params)
        while not sim.done:
            state = sim.state
            before_lane = {vid: veh.lane for vid, veh in state.vehicles.items()}
            before_phase = dict(state.phase_index)
            before_elapsed = dict(state.seconds_in_phase)
            actions = {tsc: int(rng.integers(2)) for tsc in network.tsc_ids}
            state, frame = sim.step(actions)
            _check_step(network, params, before_lane, before_phase, before_elapsed, state)
        assert state.departed > 0, run
