import json
import os
import pytest
from src.main import main
from src.utils.io_utils import load_sequences

QUIET = ["--log-file", ""]
TINY_FIT = [
    "--depths", "2", "--max-epochs", "2", "--rnn-units", "4",
    "--hidden-units", "3", "--hidden-layers", "1", "--bins", "4", "--batch-size", "64",
]


def run(*args):
    return main([*args, *QUIET])


@pytest.fixture
def poisson_file(tmp_path):
    assert run("simulate", "--process", "s_poisson", "--n", "300", "--seed", "5", "--out", str(tmp_path / "data")) == 0
    return str(tmp_path / "data" / "s_poisson.txt")


def test_simulate_writes_manifest(tmp_path):
    """Test the simulated file and its manifest"""
    out = str(tmp_path)
    assert run("simulate", "--process", "hawkes1", "--n", "200", "--seed", "7", "--out", out) == 0
    manifest = json.load(open(os.path.join(out, "hawkes1_manifest.json")))
    assert manifest["seed"] == 7
    assert manifest["counts"] == [200]
    assert manifest["process"]["alpha"] == [0.8]
    assert len(manifest["config_hash"]) == 64
    [seq] = load_sequences(os.path.join(out, "hawkes1.txt"))
    assert seq.n == 200


def test_simulate_zero_events(tmp_path):
    """Test that n = 0 writes an empty sequence"""
    assert run("simulate", "--process", "self_correcting", "--n", "0", "--out", str(tmp_path)) == 0
    [seq] = load_sequences(str(tmp_path / "self_correcting.txt"))
    assert seq.n == 0


def test_simulate_several_sequences_as_jsonl(tmp_path):
    """Test multi-sequence output in JSON Lines"""
    assert run("simulate", "--process", "hawkes2", "--n", "50", "--sequences", "3", "--format", "jsonl", "--out", str(tmp_path)) == 0
    assert len(load_sequences(str(tmp_path / "hawkes2.jsonl"), format="jsonl")) == 3


def test_unstable_process_fails(tmp_path):
    """Test that an explosive Hawkes specification exits nonzero"""
    assert run("simulate", "--process", "hawkes", "--alpha", "1.2", "--beta", "1.0", "--out", str(tmp_path)) != 0


def test_unknown_model_is_usage_error(tmp_path, poisson_file):
    """Test that argparse rejections map to exit code 2"""
    assert run("fit", "--data", poisson_file, "--model", "transformer", "--out", str(tmp_path)) == 2


def test_fit_worker_pool_matches_serial(tmp_path, poisson_file):
    """Test that training the depth grid in worker processes writes the serial checkpoint"""
    args = ("fit", "--data", poisson_file, "--model", "constant", "--depths", "2", "3", *TINY_FIT[2:])
    assert run(*args, "--threads", "1", "--out", str(tmp_path / "one")) == 0
    assert run(*args, "--threads", "2", "--out", str(tmp_path / "pool")) == 0
    assert open(tmp_path / "one" / "constant.ckpt", "rb").read() == open(tmp_path / "pool" / "constant.ckpt", "rb").read()
    assert (tmp_path / "one" / "constant_history.csv").read_text() == (tmp_path / "pool" / "constant_history.csv").read_text()


def test_report_has_no_threads_flag(tmp_path):
    """Test that report, which runs no workers, rejects --threads"""
    assert run("report", "--reports", str(tmp_path / "a.json"), "--threads", "2", "--out", str(tmp_path)) == 2


def test_simulate_with_worker_pool(tmp_path):
    """Test that pooled simulation writes the same sequences as a single worker"""
    args = ("simulate", "--process", "hawkes1", "--n", "40", "--sequences", "3", "--format", "jsonl", "--seed", "2")
    assert run(*args, "--threads", "1", "--out", str(tmp_path / "one")) == 0
    assert run(*args, "--threads", "3", "--out", str(tmp_path / "pool")) == 0
    one = load_sequences(str(tmp_path / "one" / "hawkes1.jsonl"), format="jsonl")
    pool = load_sequences(str(tmp_path / "pool" / "hawkes1.jsonl"), format="jsonl")
    assert [s.timestamps for s in one] == [s.timestamps for s in pool]


def test_negative_timestamp_file_is_runtime_error(tmp_path):
    """Test that a file with a timestamp before zero exits with 1"""
    data = tmp_path / "seq.txt"
    data.write_text("-1.0\n2.0\n3.0\n")
    assert run("fit", "--data", str(data), "--model", "constant", "--out", str(tmp_path)) == 1


def test_unknown_config_key_is_usage_error(tmp_path, poisson_file):
    """Test that a config file with unknown keys is rejected"""
    config = tmp_path / "fit.json"
    config.write_text(json.dumps({"data": poisson_file, "model": "constant", "learning_speed": 3}))
    assert run("fit", "--config", str(config), "--out", str(tmp_path)) == 2


def test_missing_data_is_runtime_error(tmp_path):
    """Test that a missing input file exits with 1"""
    assert run("fit", "--data", str(tmp_path / "nothing.txt"), "--model", "constant", "--out", str(tmp_path)) == 1


def test_fit_is_byte_identical(tmp_path, poisson_file):
    """Test that rerunning fit with the same config rewrites the same checkpoint"""
    out = str(tmp_path / "runs")
    args = ("fit", "--data", poisson_file, "--model", "chfn", "--seed", "3", "--out", out, *TINY_FIT)
    assert run(*args) == 0
    first = open(os.path.join(out, "chfn.ckpt"), "rb").read()
    assert run(*args) == 0
    assert open(os.path.join(out, "chfn.ckpt"), "rb").read() == first
    history = open(os.path.join(out, "chfn_history.csv")).read().splitlines()
    assert history[1] == "d,epoch,train_nll,val_nll,clipped_batches"


def test_fit_config_file_with_flag_override(tmp_path, poisson_file):
    """Test that flags override values from the config file"""
    config = tmp_path / "fit.json"
    config.write_text(json.dumps({"data": poisson_file, "model": "constant", "train": {"max_epochs": 50, "depth_grid": [2]}}))
    out = str(tmp_path / "runs")
    assert run("fit", "--config", str(config), "--max-epochs", "1", "--out", out) == 0
    rows = open(os.path.join(out, "constant_history.csv")).read().splitlines()[2:]
    assert len(rows) == 1


def test_evaluate_predict_report(tmp_path, poisson_file):
    """Test the test-phase commands end to end"""
    runs = str(tmp_path / "runs")
    for model in ("constant", "exponential"):
        assert run("fit", "--data", poisson_file, "--model", model, "--out", runs, *TINY_FIT) == 0
    checkpoints = [os.path.join(runs, "constant.ckpt"), os.path.join(runs, "exponential.ckpt")]

    reports = str(tmp_path / "reports")
    assert run(
        "evaluate", "--data", poisson_file, "--checkpoints", *checkpoints, "--true-spec", "s_poisson",
        "--permutations", "50", "--block-size", "10", "--intensity-out", str(tmp_path / "curves"), "--out", reports,
    ) == 0
    report = json.load(open(os.path.join(reports, "constant_report.json")))
    assert len(report["per_event_nll"]) == 60
    assert report["standardized_against"] == "true"
    assert len(report["block_scores"]) == 6
    comparison = json.load(open(os.path.join(reports, "comparison.json")))
    assert {row["model"] for row in comparison["rows"]} == {"constant", "exponential"}
    assert os.path.exists(os.path.join(reports, "exponential_blocks.csv"))
    assert os.path.exists(str(tmp_path / "curves" / "constant_intensity.csv"))

    predictions = str(tmp_path / "predictions")
    assert run("predict", "--data", poisson_file, "--checkpoint", checkpoints[0], "--out", predictions) == 0
    lines = open(os.path.join(predictions, "constant_predictions.csv")).read().splitlines()
    assert lines[1] == "sequence,index,t_last,predicted_time,converged,iterations"
    assert len(lines) == 2 + 60

    table_dir = str(tmp_path / "table")
    assert run(
        "report", "--reports", os.path.join(reports, "constant_report.json"),
        os.path.join(reports, "exponential_report.json"), "--permutations", "50", "--out", table_dir,
    ) == 0
    assert os.path.exists(os.path.join(table_dir, "comparison.csv"))
