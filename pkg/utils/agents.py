"""
Decentralized agents: DQN and IQN objectives, epsilon-greedy action
selection, the softmax ensemble of the two, replay, and the two
transportation baselines (fixed-time and greedy).

All TSCs share one parameter set per agent kind; actions are
0 (prolong) and 1 (switch) and ties go to prolong.
"""
from collections import deque
from dataclasses import dataclass

import numpy as np

from logger import setup_logger
from utils import autodiff as ad
from utils.gcnmodel import embed, mlp_q_values, q_from_quantiles, q_values, z_values
from utils.obsgraph import StateGraph, batch_graphs
from utils.simcore import PROLONG, SWITCH, SimParams, lane_queue, stopped_and_moving

logger = setup_logger("agents")

TIE_TOLERANCE = 1e-12
IRL_MAX_LANES = 8


@dataclass
class Transition:
    tsc_id: str
    state: object           # receptive-field StateGraph, or a feature vector for the MLP agent
    action: int
    reward: float
    next_state: object
    terminal: bool = False


class ReplayBuffer:
    """Ring buffer with uniform sampling (with replacement)."""

    def __init__(self, capacity, seed=0):
        if capacity < 1:
            raise ValueError("Replay capacity must be at least 1")
        self.capacity = capacity
        self._items = deque(maxlen=capacity)
        self.rng = np.random.default_rng(seed)

    def __len__(self):
        return len(self._items)

    def push(self, transition: Transition):
        self._items.append(transition)

    def extend(self, transitions):
        for t in transitions:
            self.push(t)

    def sample(self, batch_size):
        if not self._items:
            raise ValueError("Cannot sample from an empty replay buffer")
        idx = self.rng.integers(0, len(self._items), size=batch_size)
        return [self._items[i] for i in idx]


@dataclass(frozen=True)
class EnsembleConfig:
    kappa: float = 0.6
    temperature: float = 5.0

    def __post_init__(self):
        if not 0.0 <= self.kappa <= 1.0:
            raise ValueError(f"kappa must be within [0, 1], got {self.kappa}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")

    @classmethod
    def from_config(cls, cfg):
        ens = cfg.get("ensemble", {})
        return cls(kappa=ens.get("kappa", 0.6), temperature=ens.get("temperature", 5.0))


def epsilon_at(episode, start=1.0, end=0.05, episodes=30):
    """Linear annealing from ``start`` to ``end`` over the first ``episodes`` episodes."""
    if episodes <= 0 or episode >= episodes:
        return end
    return start + (end - start) * episode / episodes


# ─────────────────────────────────────────────────────────────────────────────
# Value prediction

def predict_q(states, params):
    """Deterministic Q for a list of graphs (one focus TSC each) or stacked feature vectors."""
    if isinstance(states, StateGraph):
        return q_values(embed(states, params), params)
    if states and isinstance(states[0], StateGraph):
        return q_values(embed(batch_graphs(states), params), params)
    return mlp_q_values(np.vstack(states), params)


def _batch_arrays(batch):
    if not batch:
        raise ValueError("Loss needs a non-empty batch")
    actions = np.array([t.action for t in batch], dtype=int)
    rewards = np.array([t.reward for t in batch], dtype=float)
    alive = np.array([0.0 if t.terminal else 1.0 for t in batch])
    return actions, rewards, alive


def _check_gamma(gamma):
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must be within [0, 1), got {gamma}")


def dqn_loss_from_values(q_taken, targets):
    """mean((y - Q(s, a))^2) with ``targets`` treated as constants."""
    diff = ad.sub(ad.Tensor(np.asarray(targets, dtype=float).reshape(-1, 1)), q_taken)
    return ad.mean(ad.mul(diff, diff))


def dqn_loss(batch, params, target_params, gamma):
    """Squared TD error against y = r + gamma max_a Q_target(s', a); terminal y = r."""
    _check_gamma(gamma)
    actions, rewards, alive = _batch_arrays(batch)
    with ad.no_grad():
        next_q = predict_q([t.next_state for t in batch], target_params).value
    targets = rewards + gamma * alive * next_q.max(axis=1)
    q = predict_q([t.state for t in batch], params)
    return dqn_loss_from_values(ad.pick(q, actions), targets)


def quantile_huber(delta, taus, threshold=1.0):
    """rho(delta) = |tau - 1{delta < 0}| * Huber(delta) / threshold, elementwise.

    ``taus`` broadcasts against ``delta``'s rows (one level per row).
    """
    delta = ad.as_tensor(delta)
    weight = np.abs(np.asarray(taus, dtype=float).reshape(-1, 1) - (delta.value < 0.0))
    return ad.scale(ad.mul(ad.huber(delta, threshold), ad.Tensor(weight)), 1.0 / threshold)


def iqn_loss(batch, params, target_params, gamma, m=8, m_target=8, threshold=1.0, rng=None, k_policy=32):
    """Quantile-regression loss (1/M') sum_i sum_j rho_tau_i(delta_ij), averaged over the batch.

    The next action is the argmax of the target network's mean over the
    fixed ``k_policy`` level grid.
    """
    _check_gamma(gamma)
    actions, rewards, alive = _batch_arrays(batch)
    rng = rng if rng is not None else np.random.default_rng()
    size = len(batch)

    with ad.no_grad():
        psi_next = embed(batch_graphs([t.next_state for t in batch]), target_params)
        next_actions = greedy_actions(q_from_quantiles(psi_next, target_params, k_policy).value)
        z_next, _ = z_values(psi_next, rng.random((size, m_target)), target_params)
        z_next = z_next.value[np.arange(size * m_target), np.repeat(next_actions, m_target)]
    targets = rewards[:, None] + gamma * alive[:, None] * z_next.reshape(size, m_target)

    psi = embed(batch_graphs([t.state for t in batch]), params)
    taus = rng.random((size, m))
    z, _ = z_values(psi, taus, params)
    z_taken = ad.pick(z, np.repeat(actions, m))                 # (B*M, 1)
    delta = ad.sub(ad.Tensor(np.repeat(targets, m, axis=0)), z_taken)   # (B*M, M')
    rho = quantile_huber(delta, taus.reshape(-1), threshold)
    return ad.scale(ad.sum(rho), 1.0 / (m_target * size))


# ─────────────────────────────────────────────────────────────────────────────
# Action selection

def greedy_actions(q):
    """argmax over (prolong, switch) per row; ties go to prolong."""
    q = np.atleast_2d(np.asarray(q, dtype=float))
    return np.where(q[:, SWITCH] > q[:, PROLONG] + TIE_TOLERANCE, SWITCH, PROLONG).astype(int)


def _explore(actions, epsilon, rng):
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must be within [0, 1], got {epsilon}")
    if epsilon <= 0.0:
        return actions
    rng = rng if rng is not None else np.random.default_rng()
    explore = rng.random(len(actions)) < epsilon
    return np.where(explore, rng.integers(0, 2, size=len(actions)), actions)


def _by_tsc(graph, actions):
    rows = graph.focus_rows
    tsc_rows = list(graph.rows("tsc"))
    return {graph.tsc_ids[tsc_rows.index(r)]: int(a) for r, a in zip(rows, actions)}


def act_igrl(graph, params, epsilon=0.0, rng=None):
    q = q_values(embed(graph, params), params).value
    return _by_tsc(graph, _explore(greedy_actions(q), epsilon, rng))


def act_dgrl(graph, params, epsilon=0.0, k=32, rng=None):
    q = q_from_quantiles(embed(graph, params), params, k).value
    return _by_tsc(graph, _explore(greedy_actions(q), epsilon, rng))


def softmax_normalize(q, temperature):
    """exp(Q / T) / sum_a exp(Q_a / T) per row."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    z = np.asarray(q, dtype=float) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def combine_normalized(norm_deter, norm_dis, kappa):
    if not 0.0 <= kappa <= 1.0:
        raise ValueError(f"kappa must be within [0, 1], got {kappa}")
    return kappa * np.asarray(norm_deter, dtype=float) + (1.0 - kappa) * np.asarray(norm_dis, dtype=float)


def ensemble_q(q_deter, q_dis, kappa=0.6, temperature=5.0):
    """Convex combination of the two temperature-softmaxed value vectors; returns (values, actions)."""
    q_deter = np.asarray(q_deter, dtype=float)
    q_dis = np.asarray(q_dis, dtype=float)
    if q_deter.shape != q_dis.shape:
        raise ValueError(f"Value shapes differ: {q_deter.shape} vs {q_dis.shape}")
    combined = combine_normalized(softmax_normalize(q_deter, temperature),
                                  softmax_normalize(q_dis, temperature), kappa)
    actions = greedy_actions(combined)
    return combined, (actions if q_deter.ndim > 1 else int(actions[0]))


# ─────────────────────────────────────────────────────────────────────────────
# Baselines

def baseline_fixed_time(network, green_duration=30):
    return FixedTimePolicy(network, green_duration)


def baseline_greedy(sim_state, network, tsc_id, params=None):
    """Switch iff stopped vehicles strictly outnumber moving ones on the inbound lanes."""
    stopped, moving = stopped_and_moving(sim_state, network, tsc_id, params)
    return SWITCH if stopped > moving else PROLONG


def irl_features(sim_state, network, tsc_id, params=None, max_lanes=IRL_MAX_LANES):
    """Fixed-width vector: per inbound lane (queue, vehicles), seconds in phase, clearance flag."""
    params = params or SimParams()
    lanes = network.inbound_lanes(tsc_id)[:max_lanes]
    x = np.zeros(2 * max_lanes + 2)
    for i, lane_id in enumerate(lanes):
        lane = network.lane(lane_id)
        x[2 * i] = lane_queue(sim_state, lane, params) / 10.0
        x[2 * i + 1] = len(sim_state.lane_queues.get(lane_id, ())) / 10.0
    program = network.programs[tsc_id]
    x[-2] = sim_state.seconds_in_phase[tsc_id] / 60.0
    x[-1] = 0.0 if program.is_green(sim_state.phase_index[tsc_id]) else 1.0
    return x


IRL_INPUT_DIM = 2 * IRL_MAX_LANES + 2


# ─────────────────────────────────────────────────────────────────────────────
# Policies used by the harness

class Policy:
    """act(sim_state, network, graph) -> {tsc_id: action}."""
    name = "policy"
    needs_graph = False

    def act(self, sim_state, network, graph=None):
        raise NotImplementedError


class FixedTimePolicy(Policy):
    name = "fixed"

    def __init__(self, network, green_duration=30):
        for tsc in network.tsc_ids:
            program = network.programs[tsc]
            if green_duration < program.min_phase_duration:
                raise ValueError(f"Fixed-time green of {green_duration} s is below the "
                                 f"{program.min_phase_duration} s minimum at {tsc}")
        self.green_duration = green_duration

    def act(self, sim_state, network, graph=None):
        actions = {}
        for tsc in network.tsc_ids:
            program = network.programs[tsc]
            index = sim_state.phase_index[tsc]
            due = self.green_duration if program.is_green(index) else program.clearance_duration
            actions[tsc] = SWITCH if sim_state.seconds_in_phase[tsc] >= due else PROLONG
        return actions


class GreedyPolicy(Policy):
    name = "greedy"

    def __init__(self, params=None):
        self.params = params or SimParams()

    def act(self, sim_state, network, graph=None):
        return {tsc: baseline_greedy(sim_state, network, tsc, self.params) for tsc in network.tsc_ids}


class IGRLPolicy(Policy):
    name = "igrl"
    needs_graph = True

    def __init__(self, params, epsilon=0.0, rng=None):
        self.params, self.epsilon, self.rng = params, epsilon, rng

    def act(self, sim_state, network, graph=None):
        return act_igrl(graph, self.params, self.epsilon, self.rng)


class DGRLPolicy(Policy):
    name = "dgrl"
    needs_graph = True

    def __init__(self, params, k=32, epsilon=0.0, rng=None):
        self.params, self.k, self.epsilon, self.rng = params, k, epsilon, rng

    def act(self, sim_state, network, graph=None):
        return act_dgrl(graph, self.params, self.epsilon, self.k, self.rng)


class RGLightPolicy(Policy):
    name = "rglight"
    needs_graph = True

    def __init__(self, igrl_params, dgrl_params, ensemble=None, k=32):
        self.igrl_params = igrl_params
        self.dgrl_params = dgrl_params
        self.ensemble = ensemble or EnsembleConfig()
        self.k = k

    def values(self, graph):
        q_deter = q_values(embed(graph, self.igrl_params), self.igrl_params).value
        q_dis = q_from_quantiles(embed(graph, self.dgrl_params), self.dgrl_params, self.k).value
        return q_deter, q_dis

    def act(self, sim_state, network, graph=None):
        q_deter, q_dis = self.values(graph)
        _, actions = ensemble_q(q_deter, q_dis, self.ensemble.kappa, self.ensemble.temperature)
        return _by_tsc(graph, actions)


class IRLPolicy(Policy):
    """Shared MLP over fixed-width intersection features."""
    name = "irl"

    def __init__(self, params, epsilon=0.0, rng=None, sim_params=None):
        self.params, self.epsilon, self.rng = params, epsilon, rng
        self.sim_params = sim_params or SimParams()

    def act(self, sim_state, network, graph=None):
        tscs = list(network.tsc_ids)
        x = np.vstack([irl_features(sim_state, network, t, self.sim_params) for t in tscs])
        q = mlp_q_values(x, self.params).value
        actions = _explore(greedy_actions(q), self.epsilon, self.rng)
        return dict(zip(tscs, (int(a) for a in actions)))
