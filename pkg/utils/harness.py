"""
Experiment orchestration: training runs, evaluation grids on paired trip
schedules, the generalization matrix and switch-rate statistics.

Every random stream is derived from one root seed with
``config.derive_seed``; evaluation cells are independent and may run on a
process pool, results are always assembled in sorted order.
"""
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from tqdm.auto import tqdm

from config import OUTPUT_DIR, ROOT_SEED, WORKERS, config_hash, default_run_config, derive_seed
from logger import setup_logger
from utils import autodiff as ad
from utils.agents import (IRL_INPUT_DIM, DGRLPolicy, EnsembleConfig, FixedTimePolicy, GreedyPolicy, IGRLPolicy,
                          IRLPolicy, ReplayBuffer, RGLightPolicy, Transition, dqn_loss, epsilon_at, irl_features,
                          iqn_loss)
from utils.file_loader import CheckpointMismatchError, load_checkpoint, load_network, save_checkpoint
from utils.gcnmodel import GCNConfig, init_mlp_params, init_params, layer_count
from utils.obsgraph import (FailureModel, FeatureScaling, build_state_graph, graph_to_dict, inject_failures,
                            scale_features, subgraph)
from utils.roadnet import generate_grid_network, generate_random_network
from utils.simcore import SimParams, Simulator, generate_trips, rewards_from_queues, travel_times
from utils.validator import protocol_warnings

logger = setup_logger("harness")

RL_METHODS = ("igrl", "dgrl", "rglight", "irl")
BASELINE_METHODS = ("fixed", "greedy")
NORMALIZED_MAX = 10_000.0


class TrainingDivergedError(RuntimeError):
    pass


# ─────────────────────────────────────────────────────────────────────────────
# Scenarios and records

@dataclass(frozen=True)
class ScenarioSpec:
    network: str = "grid"              # "grid", "random" or a network JSON path
    size: int = 2                      # grid rows = cols, or intersection count for "random"
    period: float = 4.0
    missing_probability: float = 0.0
    horizon: int = 1000
    seeds: tuple = tuple(range(30))
    surge_start: int = None
    surge_factor: float = 2.0
    network_seed: int = 0

    def __post_init__(self):
        if self.network not in ("grid", "random") and not os.path.exists(self.network):
            raise FileNotFoundError(f"Network file not found: {self.network}")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("Scenario seeds must be distinct")
        if not self.period > 0:
            raise ValueError(f"period must be positive, got {self.period}")
        if not 0.0 <= self.missing_probability <= 1.0:
            raise ValueError(f"missing_probability must be within [0, 1], got {self.missing_probability}")

    @property
    def network_key(self):
        if self.network == "grid":
            return f"grid{self.size}"
        if self.network == "random":
            return f"random{self.size}s{self.network_seed}"
        return os.path.splitext(os.path.basename(self.network))[0]

    @property
    def demand_key(self):
        key = f"{self.network_key}_T{self.period:g}"
        if self.surge_start is not None:
            key += f"_surge{self.surge_start}x{self.surge_factor:g}"
        return key

    @property
    def key(self):
        return f"{self.demand_key}_p{self.missing_probability:g}"

    def build_network(self, cfg=None):
        net = (cfg or default_run_config())["network"]
        kwargs = dict(lanes_per_route=net["lanes_per_route"], speed_limit=net["speed_limit"],
                      min_phase_duration=net["min_phase_duration"], clearance_duration=net["clearance_duration"])
        if self.network == "grid":
            return generate_grid_network(self.size, self.size, edge_length=net["grid_edge_length"], **kwargs)
        if self.network == "random":
            return generate_random_network(self.network_seed, self.size, allow_large=True, **kwargs)
        return load_network(self.network)


@dataclass
class EvalRecord:
    scenario: ScenarioSpec
    method: str
    rows: pd.DataFrame                 # one row per seed
    delay_curves: np.ndarray           # (n_seeds, horizon) per-step delay
    travel_times: dict = field(default_factory=dict)   # seed -> {vehicle id: travel time}
    steps: dict = field(default_factory=dict)          # seed -> per-step metrics (STEP_COLUMNS)

    @property
    def key(self):
        return f"{self.scenario.key}/{self.method}"

    def summary(self):
        out = {"scenario": self.scenario.key, "method": self.method,
               "missing_probability": self.scenario.missing_probability, "period": self.scenario.period,
               "seeds": len(self.rows)}
        for col in METRIC_COLUMNS:
            out[f"{col}_mean"] = float(self.rows[col].mean())
            out[f"{col}_std"] = float(self.rows[col].std(ddof=0))
        return out


METRIC_COLUMNS = ("sum_delay", "sum_queue", "sum_travel_time", "mean_travel_time", "arrivals",
                  "requested_switch_rate", "executed_switch_rate", "masked_switches")
STEP_COLUMNS = ("step", "sum_delay", "sum_queue", "switches", "arrivals")


# ─────────────────────────────────────────────────────────────────────────────
# Running one policy on one trip schedule

def observe(sim_state, network, scaling, failure_model=None):
    graph = build_state_graph(sim_state, network)
    if failure_model is not None:
        graph = inject_failures(graph, failure_model)
    return scale_features(graph, scaling)


def switch_rate(frames, n_tsc, column="switches"):
    """Mean over steps of (switching TSCs / TSCs)."""
    if n_tsc <= 0 or len(frames) == 0:
        return 0.0
    return float(np.mean(np.asarray(frames[column], dtype=float)) / n_tsc)


def simulate(network, schedule, policy, sim_params=None, scaling=None, failure_model=None,
             dump_every=None, dump_dir=None, dump_prefix="graph"):
    """Run ``policy`` over the whole schedule; returns (per-step DataFrame, {vehicle: travel time})."""
    sim = Simulator(network, schedule, sim_params)
    scaling = scaling or FeatureScaling()
    rows = []
    while not sim.done:
        graph = None
        dump_now = bool(dump_every and dump_dir) and sim.state.clock % dump_every == 0
        if policy.needs_graph or dump_now:
            graph = observe(sim.state, network, scaling, failure_model)
        if dump_now:
            path = os.path.join(dump_dir, f"{dump_prefix}_{sim.state.clock:05d}.json")
            with open(path, "w", encoding="utf-8") as fh:
                json.dump(graph_to_dict(graph), fh)
        actions = policy.act(sim.state, network, graph)
        _, frame = sim.step(actions)
        rows.append(frame.as_row())
    if not sim.state.check_conservation():
        raise RuntimeError(f"Vehicle conservation violated on {network.name}")
    return pd.DataFrame(rows), dict(travel_times(sim.state))


def make_policy(method, network, cfg, models=None):
    models = models or {}
    missing = [m for m in _required_models(method) if m not in models]
    if missing:
        raise ValueError(f"Method {method} needs checkpoint(s) for {missing}")
    k = cfg["model"]["eval_quantiles"]

    def store(name):
        return ad.ParamStore(models[name])

    if method == "fixed":
        return FixedTimePolicy(network, cfg["baselines"]["green_duration"])
    if method == "greedy":
        return GreedyPolicy(SimParams.from_config(cfg))
    if method == "igrl":
        return IGRLPolicy(store("igrl"))
    if method == "dgrl":
        return DGRLPolicy(store("dgrl"), k=k)
    if method == "rglight":
        return RGLightPolicy(store("igrl"), store("dgrl"), EnsembleConfig.from_config(cfg), k=k)
    if method == "irl":
        return IRLPolicy(store("irl"), sim_params=SimParams.from_config(cfg))
    raise ValueError(f"Unknown method {method}")


def _required_models(method):
    return {"igrl": ("igrl",), "dgrl": ("dgrl",), "rglight": ("igrl", "dgrl"), "irl": ("irl",)}.get(method, ())


def scenario_schedule(scenario, network, cfg, seed, root_seed):
    """Trips depend only on (network, demand, seed): every method and p sees the same schedule."""
    demand = cfg["demand"]
    return generate_trips(
        network, scenario.period, scenario.horizon,
        seed=derive_seed(root_seed, "trips", scenario.demand_key, seed),
        regime_length=demand["regime_length"], binomial_trials=demand["binomial_trials"],
        max_speed=demand["vehicle_max_speed"], surge_start=scenario.surge_start,
        surge_factor=scenario.surge_factor,
    )


def _evaluate_cell(task):
    scenario, method, seed, cfg, models, root_seed, dump_every, dump_dir = task
    ad.set_default_dtype(cfg["model"]["dtype"])
    network = scenario.build_network(cfg)
    schedule = scenario_schedule(scenario, network, cfg, seed, root_seed)
    policy = make_policy(method, network, cfg, models)
    failures = None
    if scenario.missing_probability > 0:
        failures = FailureModel(scenario.missing_probability,
                                seed=derive_seed(root_seed, "failures", scenario.key, seed))
    cell_dump = None
    if dump_every and dump_dir:
        cell_dump = os.path.join(dump_dir, scenario.key, method, f"seed{seed}")
        os.makedirs(cell_dump, exist_ok=True)
    frames, tt = simulate(network, schedule, policy, SimParams.from_config(cfg), FeatureScaling.from_config(cfg),
                          failures, dump_every, cell_dump)
    n_tsc = len(network.tsc_ids)
    row = {
        "seed": seed,
        "sum_delay": float(frames["sum_delay"].sum()),
        "sum_queue": float(frames["sum_queue"].sum()),
        "sum_travel_time": float(sum(tt.values())),
        "mean_travel_time": float(np.mean(list(tt.values()))) if tt else 0.0,
        "arrivals": int(frames["arrivals"].sum()),
        "requested_switch_rate": switch_rate(frames, n_tsc, "requested_switches"),
        "executed_switch_rate": switch_rate(frames, n_tsc, "switches"),
        "masked_switches": int(frames["masked_switches"].sum()),
        "trip_fingerprint": schedule.fingerprint(),
    }
    return (scenario.key, method, seed), row, frames[list(STEP_COLUMNS)], tt


def load_models(checkpoints, cfg):
    """Load checkpoint files (agent -> path) into parameter dicts, refusing foreign config hashes."""
    expected = config_hash(cfg)
    models = {}
    for agent, path in sorted((checkpoints or {}).items()):
        ckpt = load_checkpoint(path, expected_hash=expected)
        models[agent] = ckpt["params"].state_dict()
    return models


def evaluate(checkpoints, scenarios, cfg=None, methods=None, workers=None, root_seed=None,
             dump_every=None, dump_dir=None, models=None):
    """Run every (scenario, method, seed) cell; returns EvalRecords sorted by scenario key and method."""
    cfg = cfg or default_run_config()
    methods = list(methods or cfg["evaluation"]["methods"])
    workers = WORKERS if workers is None else workers
    root_seed = ROOT_SEED if root_seed is None else root_seed
    if not scenarios:
        raise ValueError("evaluate needs at least one scenario")
    try:
        models = models if models is not None else load_models(checkpoints, cfg)
        sample_network = scenarios[0].build_network(cfg)
        for method in methods:
            make_policy(method, sample_network, cfg, models)

        tasks = [(s, m, seed, cfg, {k: models[k] for k in _required_models(m)}, root_seed, dump_every, dump_dir)
                 for s in scenarios for m in methods for seed in s.seeds]
        logger.info(f"Evaluating {len(methods)} method(s) on {len(scenarios)} scenario(s): "
                    f"{len(tasks)} runs on {workers} worker(s).")
        results = {}
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                for key, row, steps, tt in tqdm(pool.map(_evaluate_cell, tasks), total=len(tasks), desc="evaluate"):
                    results[key] = (row, steps, tt)
        else:
            for task in tqdm(tasks, desc="evaluate"):
                key, row, steps, tt = _evaluate_cell(task)
                results[key] = (row, steps, tt)

        records = []
        for scenario in sorted(scenarios, key=lambda s: s.key):
            for method in sorted(methods):
                cells = [results[(scenario.key, method, seed)] for seed in sorted(scenario.seeds)]
                rows = pd.DataFrame([c[0] for c in cells])
                records.append(EvalRecord(
                    scenario=scenario, method=method, rows=rows,
                    delay_curves=np.vstack([c[1]["sum_delay"].to_numpy() for c in cells]),
                    travel_times={seed: c[2] for seed, c in zip(sorted(scenario.seeds), cells)},
                    steps={seed: c[1] for seed, c in zip(sorted(scenario.seeds), cells)},
                ))
        _check_pairing(records)
        logger.info(f"Evaluation finished: {len(records)} record(s).")
        return records
    except CheckpointMismatchError as e:
        logger.error(f"Refusing checkpoint: {e}")
        raise
    except Exception as e:
        logger.error(f"Evaluation failed: {e}")
        raise


def _check_pairing(records):
    by_demand = {}
    for rec in records:
        for seed, fp in zip(rec.rows["seed"], rec.rows["trip_fingerprint"]):
            expected = by_demand.setdefault((rec.scenario.demand_key, seed), fp)
            if fp != expected:
                raise RuntimeError(f"Trip schedules differ between methods for {rec.scenario.demand_key} seed {seed}")


# ─────────────────────────────────────────────────────────────────────────────
# Training

def training_networks(cfg, root_seed):
    net = cfg["network"]
    low, high = net["train_intersections"]
    rng = np.random.default_rng(derive_seed(root_seed, "train-network-sizes"))
    networks = []
    for i in range(net["train_network_count"]):
        n = int(rng.integers(low, high + 1))
        networks.append(generate_random_network(
            derive_seed(root_seed, "train-network", i), n, lanes_per_route=net["lanes_per_route"],
            speed_limit=net["speed_limit"], min_phase_duration=net["min_phase_duration"],
            clearance_duration=net["clearance_duration"]))
    return networks


class _Learner:
    """One agent kind: parameters, target copy, replay and the update rule."""

    def __init__(self, agent, cfg, root_seed):
        self.agent = agent
        self.cfg = cfg
        self.model_cfg = GCNConfig.from_config(cfg)
        self.train_cfg = cfg["training"]
        init_seed = derive_seed(root_seed, "init", agent)
        if agent == "irl":
            self.params = init_mlp_params(IRL_INPUT_DIM, self.model_cfg, init_seed)
        else:
            self.params = init_params(self.model_cfg, init_seed)
        self.target = self.params.copy()
        self.buffer = ReplayBuffer(self.train_cfg["replay_capacity"], seed=derive_seed(root_seed, "replay", agent))
        self.rng = np.random.default_rng(derive_seed(root_seed, "explore", agent))
        self.updates = 0

    @property
    def hops(self):
        return layer_count(self.params)

    def local_observations(self, sim_state, network, scaling, failures):
        if self.agent == "irl":
            params = SimParams.from_config(self.cfg)
            return None, {t: irl_features(sim_state, network, t, params) for t in network.tsc_ids}
        graph = observe(sim_state, network, scaling, failures)
        return graph, {t: subgraph(graph, t, self.hops) for t in network.tsc_ids}

    def policy(self, epsilon):
        if self.agent == "igrl":
            return IGRLPolicy(self.params, epsilon, self.rng)
        if self.agent == "dgrl":
            return DGRLPolicy(self.params, self.model_cfg.eval_quantiles, epsilon, self.rng)
        return IRLPolicy(self.params, epsilon, self.rng, SimParams.from_config(self.cfg))

    def update(self, episode):
        t = self.train_cfg
        batch = self.buffer.sample(t["batch_size"])
        with ad.Tape() as tape:
            if self.agent == "dgrl":
                m = self.model_cfg
                loss = iqn_loss(batch, self.params, self.target, t["gamma"], m.quantile_samples,
                                m.target_quantile_samples, m.huber_threshold, self.rng, m.eval_quantiles)
            else:
                loss = dqn_loss(batch, self.params, self.target, t["gamma"])
        value = float(loss.value)
        if not np.isfinite(value):
            raise TrainingDivergedError(f"{self.agent}: non-finite loss at episode {episode}, update {self.updates}")
        ad.backward(tape, loss, self.params)
        try:
            ad.clip_gradients(self.params, t["grad_clip"])
            ad.adam_step(self.params, t["lr"], t["beta1"], t["beta2"], t["adam_eps"])
        except ad.NonFiniteGradientError as e:
            raise TrainingDivergedError(f"{self.agent}: {e} at episode {episode}, update {self.updates}") from e
        self.updates += 1
        if self.updates % t["target_sync"] == 0:
            self.target = self.params.copy()
        return value


def _train_episode(learner, network, schedule, cfg, epsilon, failures, episode):
    t = cfg["training"]
    sim = Simulator(network, schedule, SimParams.from_config(cfg))
    scaling = FeatureScaling.from_config(cfg)
    policy = learner.policy(epsilon)
    graph, local = learner.local_observations(sim.state, network, scaling, failures)
    losses, rewards = [], []
    while not sim.done:
        actions = policy.act(sim.state, network, graph)
        state, frame = sim.step(actions)
        step_rewards = rewards_from_queues(frame.queues, network)
        graph, next_local = learner.local_observations(state, network, scaling, failures)
        for tsc in network.tsc_ids:
            # horizon cut-offs are truncations, so transitions keep bootstrapping
            learner.buffer.push(Transition(tsc, local[tsc], actions[tsc], step_rewards[tsc], next_local[tsc]))
            rewards.append(step_rewards[tsc])
        local = next_local
        if len(learner.buffer) >= t["batch_size"] and frame.step % t["update_every"] == 0:
            losses.append(learner.update(episode))
    return {
        "mean_loss": float(np.mean(losses)) if losses else float("nan"),
        "mean_reward": float(np.mean(rewards)) if rewards else 0.0,
        "updates": learner.updates,
        "vehicles_arrived": len(sim.state.arrived),
    }


def train_agent(agent, cfg, out_dir, root_seed=None, resume=False, networks=None):
    """Train one agent kind; writes ``<agent>.ckpt.json`` after every episode and a CSV log."""
    if agent not in ("igrl", "dgrl", "irl"):
        raise ValueError(f"Cannot train agent kind {agent}")
    root_seed = ROOT_SEED if root_seed is None else root_seed
    ad.set_default_dtype(cfg["model"]["dtype"])
    t = cfg["training"]
    for warning in protocol_warnings(cfg):
        if warning.startswith("training"):
            logger.warning(f"{agent}: {warning}")

    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, f"{agent}.ckpt.json")
    log_path = os.path.join(out_dir, f"{agent}_training_log.csv")
    learner = _Learner(agent, cfg, root_seed)
    start = 0
    log_rows = []
    if resume and os.path.exists(ckpt_path):
        ckpt = load_checkpoint(ckpt_path, expected_hash=config_hash(cfg))
        learner.params = ckpt["params"]
        learner.target = ckpt["target"] or ckpt["params"].copy()
        learner.updates = int(ckpt["extra"].get("updates", 0))
        start = ckpt["episode"]
        if os.path.exists(log_path):
            log_rows = pd.read_csv(log_path).to_dict("records")[:start]
        logger.info(f"Resuming {agent} from episode {start}.")

    networks = networks or training_networks(cfg, root_seed)
    demand = cfg["demand"]
    for episode in tqdm(range(start, t["episodes"]), desc=f"train {agent}", initial=start, total=t["episodes"]):
        network = networks[episode % len(networks)] if t["resample_network"] else networks[0]
        schedule = generate_trips(network, demand["period"], t["episode_horizon"],
                                  seed=derive_seed(root_seed, "train-trips", agent, episode),
                                  regime_length=demand["regime_length"], binomial_trials=demand["binomial_trials"],
                                  max_speed=demand["vehicle_max_speed"])
        failures = None
        if t["missing_probability"] > 0:
            failures = FailureModel(t["missing_probability"], seed=derive_seed(root_seed, "train-failures", agent, episode))
        epsilon = epsilon_at(episode, t["epsilon_start"], t["epsilon_end"], t["epsilon_episodes"])
        stats = _train_episode(learner, network, schedule, cfg, epsilon, failures, episode)
        log_rows.append({"episode": episode, "network": network.name, "epsilon": epsilon, **stats})
        logger.debug(f"{agent} episode {episode}: {stats}")
        save_checkpoint(ckpt_path, learner.params, cfg, agent, episode + 1, target_params=learner.target,
                        extra={"updates": learner.updates})
        pd.DataFrame(log_rows).to_csv(log_path, index=False)
    logger.info(f"Finished training {agent}: {learner.updates} updates, checkpoint at {ckpt_path}")
    return ckpt_path


def train(cfg=None, out_dir=None, agents=None, root_seed=None, resume=False, networks=None):
    """Train every requested agent kind separately; returns {agent: checkpoint path}."""
    cfg = cfg or default_run_config()
    out_dir = out_dir or os.path.join(OUTPUT_DIR, "checkpoints")
    agents = list(agents or cfg["training"]["agents"])
    checkpoints = {}
    try:
        for agent in agents:
            checkpoints[agent] = train_agent(agent, cfg, out_dir, root_seed, resume, networks)
        return checkpoints
    except Exception as e:
        logger.error(f"Training failed: {e}")
        raise


# ─────────────────────────────────────────────────────────────────────────────
# Analyses

def normalize_cell(values):
    """(x - min) / (max - min) * 10,000 per method; a tied cell maps to 0 and is flagged degenerate."""
    if len(values) < 2:
        raise ValueError("Normalization needs at least two methods")
    low, high = min(values.values()), max(values.values())
    if high == low:
        return {m: 0.0 for m in values}, True
    return {m: (v - low) / (high - low) * NORMALIZED_MAX for m, v in values.items()}, False


def generalization_matrix(checkpoints, cfg=None, scales=None, demands=None, methods=None, seeds=None,
                          workers=None, root_seed=None, models=None):
    """Mean delay and switch rate per (scale, demand, method), normalized per cell across methods."""
    cfg = cfg or default_run_config()
    scales = list(scales or cfg["matrix"]["scales"])
    demands = list(demands or cfg["matrix"]["demands"])
    methods = list(methods or cfg["evaluation"]["methods"])
    if len(methods) < 2:
        raise ValueError("The generalization matrix needs at least two methods")
    seeds = tuple(seeds if seeds is not None else range(cfg["evaluation"]["seeds"]))
    horizon = cfg["sim"]["horizon"]
    scenarios = [ScenarioSpec("grid", s, float(d), 0.0, horizon, seeds) for s in scales for d in demands]
    records = evaluate(checkpoints, scenarios, cfg, methods, workers, root_seed, models=models)

    rows = []
    by_cell = {}
    for rec in records:
        by_cell.setdefault((rec.scenario.size, rec.scenario.period), {})[rec.method] = rec
    for (scale, demand), cell in sorted(by_cell.items()):
        delays = {m: float(r.rows["sum_delay"].mean()) for m, r in cell.items()}
        rates = {m: float(r.rows["executed_switch_rate"].mean()) * 1000 for m, r in cell.items()}
        norm_delay, degenerate = normalize_cell(delays)
        norm_rate, _ = normalize_cell(rates)
        if degenerate:
            logger.warning(f"Degenerate matrix cell scale={scale} demand={demand}: all methods tie")
        for method in sorted(cell):
            rows.append({"scale": scale, "demand": demand, "method": method, "mean_delay": delays[method],
                         "normalized": norm_delay[method], "switch_rate_x1000": rates[method],
                         "switch_rate_normalized": norm_rate[method], "degenerate": degenerate,
                         "pool": "|".join(sorted(cell))})
    return pd.DataFrame(rows), records


def switch_rate_report(records):
    """Requested and executed switch rates x1000, averaged over seeds, per scenario and method."""
    rows = []
    for rec in records:
        rows.append({
            "scenario": rec.scenario.key, "method": rec.method,
            "requested_x1000": float(rec.rows["requested_switch_rate"].mean()) * 1000,
            "executed_x1000": float(rec.rows["executed_switch_rate"].mean()) * 1000,
            "masked_switches": float(rec.rows["masked_switches"].mean()),
        })
    return pd.DataFrame(rows)


def robustness_table(records):
    """Delay, queue and travel time by method x missing probability."""
    rows = [{"method": r.method, "missing_probability": r.scenario.missing_probability,
             "sum_delay": r.rows["sum_delay"].mean(), "sum_queue": r.rows["sum_queue"].mean(),
             "sum_travel_time": r.rows["sum_travel_time"].mean()} for r in records]
    df = pd.DataFrame(rows)
    return df.pivot_table(index="method", columns="missing_probability",
                          values=["sum_delay", "sum_queue", "sum_travel_time"], aggfunc="mean")


def regime_comparison(checkpoints, cfg=None, size=None, periods=(4.0, 2.0), methods=None, seeds=None,
                      workers=None, root_seed=None, models=None):
    """Normal vs heavy demand on the same held-out grid."""
    cfg = cfg or default_run_config()
    size = size or cfg["evaluation"]["grid_size"]
    seeds = tuple(seeds if seeds is not None else range(cfg["evaluation"]["seeds"]))
    scenarios = [ScenarioSpec("grid", size, float(p), 0.0, cfg["sim"]["horizon"], seeds) for p in periods]
    return evaluate(checkpoints, scenarios, cfg, methods, workers, root_seed, models=models)


def travel_time_differences(record_a, record_b):
    """Per-vehicle travel-time differences (a - b) on paired seeds; vehicles finishing in both runs only."""
    if record_a.scenario.demand_key != record_b.scenario.demand_key:
        raise ValueError("Travel times can only be paired on the same demand scenario")
    rows = []
    for seed in sorted(set(record_a.travel_times) & set(record_b.travel_times)):
        a, b = record_a.travel_times[seed], record_b.travel_times[seed]
        for vid in sorted(set(a) & set(b), key=lambda v: (len(v), v)):
            rows.append({"seed": seed, "vehicle": vid, "travel_time_a": a[vid], "travel_time_b": b[vid],
                         "difference": a[vid] - b[vid]})
    return pd.DataFrame(rows, columns=["seed", "vehicle", "travel_time_a", "travel_time_b", "difference"])
