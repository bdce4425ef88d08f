import datetime
from pathlib import Path

import networkx as nx
import pandas as pd

from config import DEFAULT_RUN_CONFIG
from logger import setup_logger

logger = setup_logger("validator")

GENERATED_LENGTH_BOUNDS = (100.0, 300.0)
PROTOCOL_MISSING_PROBABILITIES = (0.0, 0.2, 0.4, 0.6)


def validate_network(network, length_bounds=GENERATED_LENGTH_BOUNDS):
    """Check the road-network invariants; returns (check type, object, issue) tuples."""
    results = []
    results.extend(('Connections', obj, issue) for obj, issue in check_connections(network))
    results.extend(('Programs', obj, issue) for obj, issue in check_programs(network))
    if length_bounds is not None:
        results.extend(('Lane Length', obj, issue) for obj, issue in check_lane_lengths(network, length_bounds))
    results.extend(('Connectivity', obj, issue) for obj, issue in check_connectivity(network))
    return results


def check_connections(network):
    issues = []
    for conn in network.connections:
        if not network.has_lane(conn.from_lane) or not network.has_lane(conn.to_lane):
            issues.append((conn.id, f"references an unknown lane ({conn.from_lane} -> {conn.to_lane})"))
            continue
        if not network.has_intersection(conn.intersection_id):
            issues.append((conn.id, f"references unknown intersection {conn.intersection_id}"))
            continue
        inbound = network.lane(conn.from_lane)
        outbound = network.lane(conn.to_lane)
        if inbound.to_node != conn.intersection_id or outbound.from_node != conn.intersection_id:
            issues.append((conn.id, f"lanes do not meet at intersection {conn.intersection_id}"))
    return issues


def check_programs(network):
    issues = []
    for node in network.intersections:
        if not node.signalized:
            continue
        program = network.programs.get(node.id)
        if program is None:
            issues.append((node.id, "signalized intersection without a program"))
            continue
        if len(program.phases) < 2:
            issues.append((node.id, f"program has {len(program.phases)} phase(s), expected at least 2"))
        missing = set(node.connections) - program.controllable()
        if missing:
            issues.append((node.id, f"{len(missing)} connection(s) never open: {sorted(missing)[:5]}"))
        # Switching len(phases) times must come back to the start
        index = 0
        for _ in range(len(program.phases)):
            index = program.advance(index)
        if index != 0:
            issues.append((node.id, "phase cycle does not close"))
    return issues


def check_lane_lengths(network, bounds):
    low, high = bounds
    return [(lane.id, f"length {lane.length} outside [{low}, {high}]")
            for lane in network.lanes if not low <= lane.length <= high]


def check_connectivity(network):
    """Every lane must be reachable from a source lane and reach a sink lane."""
    graph = network.lane_graph
    sources = network.source_lanes
    sinks = network.sink_lanes
    if not sources or not sinks:
        return [(network.name, "network has no source or no sink lanes")]

    reachable = set(sources)
    for lane_id in sources:
        reachable |= nx.descendants(graph, lane_id)
    reaching = set(sinks)
    for lane_id in sinks:
        reaching |= nx.ancestors(graph, lane_id)

    issues = []
    for lane in network.lanes:
        if lane.id not in reachable:
            issues.append((lane.id, "not reachable from any source"))
        if lane.id not in reaching:
            issues.append((lane.id, "does not reach any sink"))
    return issues


def validate_run_config(cfg):
    """Check a merged run configuration; returns (check type, key, issue) tuples."""
    results = []
    for section, values in cfg.items():
        if section not in DEFAULT_RUN_CONFIG:
            results.append(('Schema', section, "unknown section"))
            continue
        for key in values:
            if key not in DEFAULT_RUN_CONFIG[section]:
                results.append(('Schema', f"{section}.{key}", "unknown key"))

    model = cfg.get("model", {})
    if model.get("layers", 3) < 2:
        results.append(('Range', "model.layers", "needs at least 2 GCN layers"))
    for key in ("hidden", "quantile_embedding", "quantile_samples", "target_quantile_samples", "eval_quantiles"):
        if model.get(key, 1) < 1:
            results.append(('Range', f"model.{key}", "must be >= 1"))
    if model.get("huber_threshold", 1.0) <= 0:
        results.append(('Range', "model.huber_threshold", "must be > 0"))
    if model.get("dtype", "float64") not in ("float32", "float64"):
        results.append(('Range', "model.dtype", "must be float32 or float64"))

    training = cfg.get("training", {})
    if not 0 <= training.get("gamma", 0.95) < 1:
        results.append(('Range', "training.gamma", "must be within [0, 1)"))
    p_train = training.get("missing_probability", 0.0)
    if not 0 <= p_train <= 1:
        results.append(('Range', "training.missing_probability", "must be within [0, 1]"))

    ensemble = cfg.get("ensemble", {})
    if not 0 <= ensemble.get("kappa", 0.6) <= 1:
        results.append(('Range', "ensemble.kappa", "must be within [0, 1]"))
    if ensemble.get("temperature", 5.0) <= 0:
        results.append(('Range', "ensemble.temperature", "must be > 0"))

    evaluation = cfg.get("evaluation", {})
    for p in evaluation.get("missing_probabilities", []):
        if not 0 <= p <= 1:
            results.append(('Range', "evaluation.missing_probabilities", f"{p} outside [0, 1]"))

    network = cfg.get("network", {})
    baselines = cfg.get("baselines", {})
    if baselines.get("green_duration", 30) < network.get("min_phase_duration", 5):
        results.append(('Range', "baselines.green_duration", "shorter than network.min_phase_duration"))
    return results


def protocol_warnings(cfg):
    """Settings that run but deviate from the published protocol."""
    warnings = []
    if cfg.get("training", {}).get("missing_probability", 0.0) > 0:
        warnings.append("training with missing data (the protocol trains without sensor failures)")
    for p in cfg.get("evaluation", {}).get("missing_probabilities", []):
        if p not in PROTOCOL_MISSING_PROBABILITIES:
            warnings.append(f"missing probability {p} is not one of {PROTOCOL_MISSING_PROBABILITIES}")
    return warnings


def write_validation_report(validation_results, output_folder):
    report_df = pd.DataFrame(validation_results, columns=['Check Type', 'Object', 'Issue'])

    timestamp = datetime.datetime.now().strftime('%Y%m%d_%H%M%S')
    report_path = Path(output_folder) / f'validation_report_{timestamp}.xlsx'
    report_path.parent.mkdir(parents=True, exist_ok=True)

    with pd.ExcelWriter(report_path, engine='openpyxl') as writer:
        report_df.to_excel(writer, index=False, sheet_name='Validation Results')

    logger.info(f"Validation report saved to: {report_path}")
    return report_path
