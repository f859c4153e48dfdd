import json
import math
import numpy as np
import pytest
from src.models.sequence_models import EventSequence
from src.services.sequence_service import decode, encode
from src.utils.errors import ContractError, SequenceParseError, SequenceValidationError
from src.utils.io_utils import load_sequences, merge_config, write_sequences


def test_encode_intervals(sequence_service):
    """Test log encoding of raw intervals"""
    seq = EventSequence(timestamps=(0.0, 1.0, 3.0), t_start=0.0, t_end=3.0)
    features = sequence_service.encode_intervals(seq)
    assert [f.raw_interval for f in features] == [1.0, 2.0]
    assert features[0].x == pytest.approx(math.log(1.0 + 1e-9), abs=1e-15)
    assert decode(encode(np.array([2.0])))[0] == pytest.approx(2.0, rel=1e-12)


def test_zero_interval_is_finite():
    """Test that tied timestamps encode to a finite input"""
    assert np.isfinite(encode(np.array([0.0]))).all()


def test_tied_timestamps_allowed():
    """Test that equal timestamps are accepted and decreasing ones rejected"""
    seq = EventSequence(timestamps=(1.0, 1.0, 2.0), t_start=0.0, t_end=2.0)
    assert seq.intervals().tolist() == [0.0, 1.0]
    with pytest.raises(ValueError):
        EventSequence(timestamps=(1.0, 0.5), t_start=0.0, t_end=2.0)


def test_split_train_test(sequence_service, sample_sequence):
    """Test chronological 80/20 split"""
    train, test = sequence_service.split_train_test(sample_sequence, 0.8)
    assert train.n == 8
    assert test.timestamps == (9.0, 11.0)
    assert train.t_end == 8.0
    assert test.t_start == 8.0


@pytest.mark.parametrize("frac", [0.0, 1.0, -0.2, 1.5])
def test_split_rejects_bad_fraction(sequence_service, sample_sequence, frac):
    """Test that split fractions outside (0, 1) are contract errors"""
    with pytest.raises(ContractError):
        sequence_service.split_train_test(sample_sequence, frac)


def test_split_dataset_by_sequences(sequence_service, sample_sequence):
    """Test whole-sequence split keeps the first sequences for training"""
    train, test = sequence_service.split_dataset([sample_sequence] * 5, 0.8, mode="sequences")
    assert len(train) == 4
    assert len(test) == 1


def test_window_arrays(sequence_service, sample_sequence):
    """Test windows of depth 3 and their targets"""
    inputs, targets = sequence_service.window_arrays(sample_sequence, 3)
    intervals = sample_sequence.intervals()
    assert inputs.shape == (6, 3)
    assert np.allclose(inputs[0], encode(intervals[:3]))
    assert targets.tolist() == [1.25, 2.0, 0.5, 1.5, 1.0, 2.0]


def test_make_windows_matches_arrays(sequence_service, sample_sequence):
    """Test that TrainingWindow objects stack back into the array form"""
    windows = sequence_service.make_windows(sample_sequence, 2)
    inputs, targets = sequence_service.stack_windows(windows)
    ref_inputs, ref_targets = sequence_service.window_arrays(sample_sequence, 2)
    assert np.array_equal(inputs, ref_inputs)
    assert np.array_equal(targets, ref_targets)
    assert windows[0].intervals == (0.5, 1.5)


def test_short_sequence_yields_no_windows(sequence_service):
    """Test that a sequence shorter than d + 2 events gives no windows"""
    seq = EventSequence(timestamps=(1.0, 2.0, 3.0), t_start=0.0, t_end=3.0)
    inputs, targets = sequence_service.window_arrays(seq, 5)
    assert inputs.shape == (0, 5)
    assert len(targets) == 0


def test_history_carry_over(sequence_service, sample_sequence):
    """Test that carrying history makes every test event scorable"""
    train, test = sequence_service.split_train_test(sample_sequence, 0.8)
    combined, count = sequence_service.with_history(train, test, 3)
    assert combined.timestamps == (4.0, 6.0, 6.5, 8.0, 9.0, 11.0)
    assert count == test.n
    _, alone = sequence_service.with_history(None, test, 3)
    assert alone == 0


def test_load_plain_sequence(tmp_path):
    """Test loading a plain file with comments and blank lines"""
    path = tmp_path / "seq.txt"
    path.write_text("# seed=1\n0.5\n\n1.25\n3.0\n")
    [seq] = load_sequences(str(path))
    assert seq.timestamps == (0.5, 1.25, 3.0)


def test_non_monotone_reports_line(tmp_path):
    """Test that a decreasing timestamp names its line"""
    path = tmp_path / "seq.txt"
    path.write_text("1.0\n2.0\n1.5\n")
    with pytest.raises(SequenceValidationError) as exc:
        load_sequences(str(path))
    assert exc.value.line == 3
    assert "non-monotone" in str(exc.value)


def test_negative_timestamp_is_validation_error(tmp_path):
    """Test that a timestamp before the window start is reported with its line"""
    path = tmp_path / "seq.txt"
    path.write_text("# shifted\n-1.0\n2.0\n")
    with pytest.raises(SequenceValidationError) as exc:
        load_sequences(str(path))
    assert exc.value.line == 2
    assert "outside" in str(exc.value)


def test_unparseable_token(tmp_path):
    """Test that a non-numeric token is a parse error"""
    path = tmp_path / "seq.txt"
    path.write_text("1.0\nabc\n")
    with pytest.raises(SequenceParseError) as exc:
        load_sequences(str(path))
    assert exc.value.line == 2


def test_write_and_load_directory(tmp_path, sample_sequence):
    """Test writing several sequences as a directory and reading them back"""
    written = write_sequences([sample_sequence, sample_sequence], str(tmp_path / "data"), header={"seed": 3})
    assert len(written) == 2
    loaded = load_sequences(str(tmp_path / "data"))
    assert [s.timestamps for s in loaded] == [sample_sequence.timestamps] * 2
    assert open(written[0]).readline().strip() == "# seed=3"


def test_jsonl_meta_line(tmp_path, sample_sequence):
    """Test that the JSON Lines writer adds a metadata line the loader skips"""
    path = tmp_path / "data.jsonl"
    write_sequences([sample_sequence], str(path), format="jsonl", header={"config_hash": "abc"})
    first = json.loads(path.read_text().splitlines()[0])
    assert first == {"_meta": {"config_hash": "abc"}}
    [seq] = load_sequences(str(path), format="jsonl")
    assert seq == sample_sequence


def test_merge_config_overrides():
    """Test that flags override file values, including nested keys"""
    merged = merge_config(
        {"model": "constant", "train": {"max_epochs": 10, "patience": 2}},
        {"model": "chfn", "train.max_epochs": 3, "seed": None},
    )
    assert merged == {"model": "chfn", "train": {"max_epochs": 3, "patience": 2}}
