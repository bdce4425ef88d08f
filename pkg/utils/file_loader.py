import copy
import json
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from config import CHECKPOINT_VERSION, config_hash, default_run_config
from logger import setup_logger
from utils.autodiff import ParamStore
from utils.roadnet import network_from_dict, serialize_network

logger = setup_logger("file_loader")


CHECKPOINT_FORMAT = "rglight-checkpoint"


class CheckpointMismatchError(ValueError):
    pass


def deep_merge(base, override):
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def load_run_config(path=None):
    """Defaults overlaid with a JSON or TOML file (chosen by suffix)."""
    if path is None:
        return default_run_config()
    logger.info(f"Loading run configuration from: {path}")
    try:
        if not os.path.exists(path):
            raise FileNotFoundError(f"Config file not found: {path}")
        suffix = os.path.splitext(path)[1].lower()
        if suffix == ".toml":
            with open(path, "rb") as fh:
                override = tomllib.load(fh)
        elif suffix == ".json":
            with open(path, encoding="utf-8") as fh:
                override = json.load(fh)
        else:
            raise ValueError(f"Config file must be .json or .toml, got {suffix or 'no suffix'}")
        cfg = deep_merge(default_run_config(), override)
        logger.info(f"Loaded run configuration (hash {config_hash(cfg)}).")
        return cfg
    except Exception as e:
        logger.error(f"Failed to load run configuration: {e}")
        raise


def save_network(network, path):
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(serialize_network(network))
        logger.info(f"Saved network {network.name} to: {path}")
        return path
    except Exception as e:
        logger.error(f"Failed to save network: {e}")
        raise


def load_network(path):
    logger.info(f"Loading network from: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            network = network_from_dict(json.load(fh))
        logger.info(f"Loaded network {network.name}: {len(network.intersections)} intersections, "
                    f"{len(network.lanes)} lanes.")
        return network
    except Exception as e:
        logger.error(f"Failed to load network from {path}: {e}")
        raise


def _encode_arrays(arrays):
    return {name: {"shape": list(np.shape(value)), "data": np.asarray(value, dtype=float).ravel().tolist()}
            for name, value in arrays.items()}


def _decode_arrays(doc):
    return {name: np.array(entry["data"], dtype=float).reshape(entry["shape"]) for name, entry in doc.items()}


def save_checkpoint(path, params, cfg, agent, episode, target_params=None, extra=None):
    """JSON checkpoint: header (version, config hash, model section) plus named tensors."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config_hash": config_hash(cfg),
        "agent": agent,
        "episode": int(episode),
        "model": cfg.get("model", {}),
        "features": cfg.get("features", {}),
        "params": _encode_arrays(params.state_dict()),
        "optimizer": {
            "t": params.opt_state["t"],
            "m": _encode_arrays(params.opt_state["m"]),
            "v": _encode_arrays(params.opt_state["v"]),
        },
        "extra": extra or {},
    }
    if target_params is not None:
        doc["target"] = _encode_arrays(target_params.state_dict())
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh)
        logger.info(f"Saved {agent} checkpoint (episode {episode}) to: {path}")
        return path
    except Exception as e:
        logger.error(f"Failed to save checkpoint: {e}")
        raise


def load_checkpoint(path, expected_hash=None):
    """Returns a dict with ``params`` (ParamStore), ``target`` (or None), ``agent``, ``episode``, ``config_hash``."""
    logger.info(f"Loading checkpoint from: {path}")
    try:
        if not os.path.exists(path):
            raise FileNotFoundError(f"Checkpoint not found: {path}")
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a checkpoint file")
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"Unsupported checkpoint version {doc.get('version')}")
        if expected_hash is not None and doc["config_hash"] != expected_hash:
            raise CheckpointMismatchError(
                f"Checkpoint {path} was trained with config hash {doc['config_hash']}, "
                f"current model config hash is {expected_hash}")

        params = ParamStore(_decode_arrays(doc["params"]))
        opt = doc.get("optimizer", {})
        params.opt_state = {"t": opt.get("t", 0), "m": _decode_arrays(opt.get("m", {})),
                            "v": _decode_arrays(opt.get("v", {}))}
        target = ParamStore(_decode_arrays(doc["target"])) if "target" in doc else None
        return {
            "params": params,
            "target": target,
            "agent": doc["agent"],
            "episode": doc["episode"],
            "config_hash": doc["config_hash"],
            "model": doc.get("model", {}),
            "extra": doc.get("extra", {}),
        }
    except Exception as e:
        logger.error(f"Failed to load checkpoint: {e}")
        raise
