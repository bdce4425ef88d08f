from config import default_run_config
from utils.roadnet import generate_grid_network
from utils.validator import protocol_warnings, validate_network, validate_run_config, write_validation_report


def test_missing_program_is_reported(grid2):
    del grid2.programs["I0_0"]
    issues = validate_network(grid2)
    assert ('Programs', "I0_0", "signalized intersection without a program") in issues


def test_lane_length_bounds():
    network = generate_grid_network(2, 2, edge_length=300)
    assert validate_network(network) == []
    issues = validate_network(network, length_bounds=(100.0, 200.0))
    assert issues and all(check == 'Lane Length' for check, _, _ in issues)


def test_default_config_is_clean():
    cfg = default_run_config()
    assert validate_run_config(cfg) == []
    assert protocol_warnings(cfg) == []


def test_config_schema_and_ranges():
    cfg = default_run_config()
    cfg["training"]["gamma"] = 1.0
    cfg["training"]["colour"] = "blue"
    cfg["baselines"]["green_duration"] = 3
    cfg["plots"] = {}
    keys = {key for _, key, _ in validate_run_config(cfg)}
    assert keys == {"training.gamma", "training.colour", "baselines.green_duration", "plots"}


def test_training_with_missing_data_warns():
    cfg = default_run_config()
    cfg["training"]["missing_probability"] = 0.2
    cfg["evaluation"]["missing_probabilities"] = [0.0, 0.3]
    warnings = protocol_warnings(cfg)
    assert any(w.startswith("training with missing data") for w in warnings)
    assert any("0.3" in w for w in warnings)


def test_report_is_written(tmp_path, grid2):
    del grid2.programs["I1_1"]
    path = write_validation_report(validate_network(grid2), tmp_path)
    assert path.exists() and path.suffix == ".xlsx"
