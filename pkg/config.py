import copy
import hashlib
import json
import os

from dotenv import load_dotenv

load_dotenv()


APP_TITLE = os.getenv("APP_TITLE", "RGLight Workbench")
OUTPUT_DIR = os.getenv("RGLIGHT_OUTPUT_DIR", "outputs")
WORKERS = int(os.getenv("RGLIGHT_WORKERS", "1"))
ROOT_SEED = int(os.getenv("RGLIGHT_ROOT_SEED", "0"))
LOG_LEVEL = os.getenv("RGLIGHT_LOG_LEVEL", "INFO")

CHECKPOINT_VERSION = 1
NETWORK_FORMAT_VERSION = 1

DEFAULT_RUN_CONFIG = {
    "network": {
        "speed_limit": 13.89,
        "min_phase_duration": 5,
        "clearance_duration": 2,
        "lanes_per_route": 1,
        "grid_edge_length": 150.0,
        "train_network_count": 10,
        "train_intersections": [2, 6],
    },
    "demand": {
        "period": 4.0,
        "regime_length": 120,
        "binomial_trials": 4,
        "vehicle_max_speed": 15.0,
    },
    "sim": {
        "horizon": 1000,
        "accel": 2.6,
        "decel": 4.5,
        "spacing": 7.5,
        "standing_speed": 0.1,
    },
    "features": {
        "tsc_seconds_scale": 60.0,
        "lane_length_scale": 300.0,
        "speed_scale": 13.89,
    },
    "model": {
        "layers": 3,
        "hidden": 32,
        "quantile_embedding": 64,
        "quantile_samples": 8,
        "target_quantile_samples": 8,
        "eval_quantiles": 32,
        "huber_threshold": 1.0,
        "head_hidden": False,
        "dtype": "float64",
    },
    "training": {
        "agents": ["igrl", "dgrl"],
        "episodes": 60,
        "episode_horizon": 1000,
        "gamma": 0.95,
        "lr": 1e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "adam_eps": 1e-8,
        "replay_capacity": 50000,
        "batch_size": 64,
        "update_every": 2,
        "target_sync": 500,
        "epsilon_start": 1.0,
        "epsilon_end": 0.05,
        "epsilon_episodes": 30,
        "missing_probability": 0.0,
        "resample_network": True,
        "grad_clip": 10.0,
    },
    "ensemble": {
        "kappa": 0.6,
        "temperature": 5.0,
    },
    "evaluation": {
        "seeds": 30,
        "missing_probabilities": [0.0, 0.2, 0.4, 0.6],
        "methods": ["fixed", "greedy", "igrl", "dgrl", "rglight"],
        "grid_size": 2,
        "period": 4.0,
        "surge_start": None,
        "surge_factor": 2.0,
    },
    "matrix": {
        "scales": [2, 4, 6, 8],
        "demands": [0.5, 1.0, 2.0, 4.0],
    },
    "baselines": {
        "green_duration": 30,
    },
}

# Sections whose values change what a checkpoint means.
MODEL_SECTIONS = ("features", "model")


def default_run_config():
    return copy.deepcopy(DEFAULT_RUN_CONFIG)


def config_hash(cfg: dict) -> str:
    payload = {section: cfg.get(section, {}) for section in MODEL_SECTIONS}
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def derive_seed(root_seed: int, *parts) -> int:
    """Derive a 63-bit seed for one random stream from the root seed."""
    text = "|".join([str(int(root_seed))] + [str(p) for p in parts])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") & ((1 << 63) - 1)
