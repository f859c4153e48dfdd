import math
import numpy as np
import pytest
from src.models.config_models import EvalOptions, ProcessSpec
from src.models.report_models import EvalReport
from src.models.sequence_models import EventSequence
from src.services.evaluation_service import full_sequence
from src.services.hazard_service import (
    ConstantHazard,
    CumulativeHazardNetwork,
    ExponentialHazard,
    HazardEvaluator,
    PiecewiseHazard,
)
from src.services.simulation_service import preset
from src.utils.errors import ContractError

LOG_TWO = math.log(2.0)


def constant_params(b=0.0):
    return {"hazard.v": np.zeros(4), "hazard.b": np.array(b)}


def exponential_params(w, b=0.0):
    return {"hazard.w": np.array(w), "hazard.v": np.zeros(4), "hazard.b": np.array(b)}


def report(name, nll, errors, mae=None):
    return EvalReport(
        model=name,
        depth=2,
        intervals=[1.0] * len(nll),
        per_event_nll=nll,
        mean_nll=float(np.mean(nll)),
        abs_errors=errors,
        mae=mae,
    )


@pytest.mark.parametrize(
    "model, params, expected",
    [
        (ConstantHazard(4), constant_params(), LOG_TWO),
        (ExponentialHazard(4), exponential_params(1.0), math.log(1.0 + LOG_TWO)),
        (
            PiecewiseHazard(4, bins=8, tau_max=4.0),
            {"hazard.V": np.zeros((8, 4)), "hazard.b": np.full(8, math.log(math.e - 1.0))},
            LOG_TWO,
        ),
    ],
)
def test_median_examples(evaluation_service, model, params, expected):
    """Test medians of hazards with a known solution"""
    batch = evaluation_service.predict_median(HazardEvaluator(model, params), np.zeros((1, 4)), np.array([0.0, 5.0]))
    assert np.allclose(batch.predicted_time, [expected, 5.0 + expected], atol=1e-8)
    assert batch.converged.all()
    assert np.all(batch.iterations > 0)


@pytest.mark.parametrize("w", [-0.3, 0.0, 0.5, 1.0])
@pytest.mark.parametrize("b", [-1.0, 0.0, 1.0])
def test_bisection_matches_closed_form(evaluation_service, w, b):
    """Test the root finder against the exponential family's closed-form median"""
    model = ExponentialHazard(4)
    params = exponential_params(w, b)
    h = np.zeros((1, 4))
    batch = evaluation_service.predict_median(HazardEvaluator(model, params), h, np.array([0.0]), tol=1e-12)
    assert batch.converged[0]
    assert batch.predicted_time[0] == pytest.approx(model.closed_form_median(params, h)[0], rel=1e-9)


def test_saturating_hazard_is_not_converged(evaluation_service):
    """Test that a cumulative hazard bounded below log 2 is flagged, not imputed"""
    evaluator = HazardEvaluator(ExponentialHazard(4), exponential_params(-2.0))
    batch = evaluation_service.predict_median(evaluator, np.zeros((1, 4)), np.array([3.0]))
    assert not batch.converged[0]
    assert batch.predicted_time[0] == 3.0 + 2.0 ** 64
    assert math.isnan(ExponentialHazard(4).closed_form_median(exponential_params(-2.0), np.zeros((1, 4)))[0])


def test_cumulative_above_log_two_at_zero(evaluation_service, rng):
    """Test that Phi(0) > log 2 returns the last event time, flagged"""
    model = CumulativeHazardNetwork(4, hidden_units=3, hidden_layers=1)
    params = model.init_params(rng)
    params["hazard.b_out"] = np.array([5.0])
    batch = evaluation_service.predict_median(HazardEvaluator(model, params), np.zeros((1, 4)), np.array([2.0]))
    assert batch.predicted_time[0] == 2.0
    assert not batch.converged[0]


def test_score_nll_with_history(evaluation_service, sequence_service, unit_rate_checkpoint, sample_sequence):
    """Test that carried history makes every test event scored at Phi - log phi = tau"""
    train, test = sequence_service.split_train_test(sample_sequence, 0.8)
    scored = evaluation_service.score_nll(unit_rate_checkpoint, test, train)
    assert len(scored.nll) == test.n
    assert np.allclose(scored.nll, [1.0, 2.0])
    assert scored.last_times.tolist() == [8.0, 9.0]

    alone = evaluation_service.score_nll(unit_rate_checkpoint, test)
    assert len(alone.nll) == 0


def test_exact_medians_give_zero_mae(evaluation_service, sequence_service, unit_rate_checkpoint):
    """Test evaluation on gaps that equal the unit-rate median"""
    seq = EventSequence(timestamps=tuple(LOG_TWO * k for k in range(1, 21)), t_start=0.0, t_end=20 * LOG_TWO)
    train, test = sequence_service.split_train_test(seq, 0.8)
    result = evaluation_service.evaluate(unit_rate_checkpoint, [train], [test], EvalOptions(block_size=2))
    assert result.mae == pytest.approx(0.0, abs=1e-8)
    assert result.non_converged == 0
    assert result.mean_nll == pytest.approx(LOG_TWO)
    assert result.block_scores == pytest.approx([LOG_TWO, LOG_TWO])
    assert len(result.predictions) == test.n


def test_score_mae_skips_non_converged(evaluation_service):
    """Test that MAE ignores flagged predictions and counts them"""
    mae, skipped = evaluation_service.score_mae(np.array([1.0, 5.0, 2.0]), np.array([1.5, 1.0, 1.0]), np.array([True, False, True]))
    assert mae == pytest.approx(0.75)
    assert skipped == 1
    assert evaluation_service.score_mae(np.array([1.0]), np.array([2.0]), np.array([False])) == (None, 1)


def test_blocks_and_bands(evaluation_service):
    """Test block means and their interquartile band"""
    blocks = evaluation_service.block_scores(np.arange(1.0, 12.0), block_size=2)
    assert blocks.tolist() == [1.5, 3.5, 5.5, 7.5, 9.5]
    assert evaluation_service.percentile_bands(np.array([1.0, 2.0, 3.0, 4.0, 5.0])) == (2.0, 4.0)
    assert evaluation_service.percentile_bands(evaluation_service.block_scores(np.ones(3), 5)) == (None, None)


def test_standardized_scores(evaluation_service):
    """Test score differences and the event-count check"""
    model = report("model", [1.5, 2.5], [None, None])
    truth = report("true", [1.0, 2.0], [None, None])
    assert evaluation_service.standardized_scores(model, truth) == pytest.approx(0.5)
    with pytest.raises(ContractError):
        evaluation_service.standardized_scores(model, report("true", [1.0], [None]))


def test_standardize_against_reference(evaluation_service):
    """Test standardizing every report against a named one"""
    reports = [report("a", [1.0, 3.0], [0.1, 0.2]), report("b", [1.0, 1.0], [0.3, 0.4])]
    updated = evaluation_service.standardize_against(reports, "b")
    assert [r.standardized_mean_nll for r in updated] == [1.0, 0.0]
    assert updated[0].standardized_against == "b"
    with pytest.raises(ContractError):
        evaluation_service.standardize_against(reports, "c")


def test_permutation_test(evaluation_service):
    """Test the p-value bounds of the paired sign-flip test"""
    errors = np.linspace(0.1, 2.0, 50)
    assert evaluation_service.permutation_test(errors, errors, resamples=200, seed=1) == 1.0
    assert evaluation_service.permutation_test(errors + 1.0, errors, resamples=200, seed=1) == pytest.approx(1.0 / 201)
    with pytest.raises(ContractError):
        evaluation_service.permutation_test(errors, errors[:10])


def test_compare_reports(evaluation_service):
    """Test ranking by MAE and the paired test between the two best models"""
    rng = np.random.default_rng(0)
    base = rng.exponential(1.0, size=40)
    reports = [
        report("worst", [1.0] * 40, list(base + 2.0), mae=float(np.mean(base + 2.0))),
        report("best", [1.0] * 40, list(base), mae=float(np.mean(base))),
        report("second", [1.0] * 40, list(base + 0.5), mae=float(np.mean(base + 0.5))),
    ]
    table = evaluation_service.compare_reports(reports, resamples=100, seed=3)
    assert [row.model for row in table.rows] == ["worst", "best", "second"]
    assert table.best_mae_model == "best"
    assert table.runner_up_mae_model == "second"
    assert 0.0 < table.mae_p_value <= 1.0


def test_evaluate_standardized_on_true_model(evaluation_service, sequence_service, unit_rate_checkpoint, poisson_sequence):
    """Test that the unit-rate model scores exactly like the unit-rate true process"""
    train, test = sequence_service.split_train_test(poisson_sequence, 0.8)
    result = evaluation_service.evaluate(
        unit_rate_checkpoint, [train], [test], EvalOptions(), ProcessSpec(kind="s_poisson", rate=1.0),
    )
    assert result.standardized_against == "true"
    assert result.standardized_mean_nll == pytest.approx(0.0, abs=1e-12)
    assert len(result.per_event_nll) == test.n


def test_intensity_curve(evaluation_service, sequence_service, unit_rate_checkpoint, poisson_sequence):
    """Test the intensity grid inside test intervals"""
    train, test = sequence_service.split_train_test(poisson_sequence, 0.8)
    rows = evaluation_service.intensity_curve(
        unit_rate_checkpoint, train, test, intervals=5, points=4, true_spec=ProcessSpec(kind="s_poisson", rate=1.0),
    )
    assert len(rows) == 20
    assert all(len(row) == 3 for row in rows)
    assert np.allclose([row[1] for row in rows], 1.0)
    assert np.allclose([row[2] for row in rows], 1.0)
    assert rows[3][0] == pytest.approx(test.timestamps[0])


def test_write_report(evaluation_service, tmp_path):
    """Test the JSON and per-event CSV outputs"""
    result = report("constant", [1.0, 2.0], [0.5, None])
    json_path, csv_path = evaluation_service.write_report(result, str(tmp_path / "r.json"), str(tmp_path / "r.csv"))
    assert EvalReport.model_validate_json(open(json_path).read()).model == "constant"
    lines = open(csv_path).read().splitlines()
    assert lines[0].startswith("#")
    assert lines[1] == "index,tau,nll,predicted,abs_error,converged"


@pytest.mark.parametrize("process", ["self_correcting", "hawkes2"])
def test_true_scores_see_full_past_without_carried_history(
    evaluation_service, sequence_service, simulation_service, unit_rate_checkpoint, process,
):
    """Test that the true process is scored on the whole past even when the model starts cold"""
    spec = preset(process)
    seq = simulation_service.simulate(spec, 600, seed=11)
    train, test = sequence_service.split_train_test(seq, 0.8)
    result = evaluation_service.evaluate(unit_rate_checkpoint, [train], [test], EvalOptions(carry_history=False), spec)
    count = len(result.per_event_nll)
    expected = simulation_service.true_nll(spec, full_sequence(train, test))[-count:]
    assert math.isfinite(result.true_mean_nll)
    assert result.true_mean_nll == pytest.approx(float(np.mean(expected)), rel=1e-12)
    assert result.standardized_mean_nll == pytest.approx(result.mean_nll - result.true_mean_nll)


def test_worker_pool_matches_serial(evaluation_service, sequence_service, unit_rate_checkpoint, poisson_sequence):
    """Test that evaluate_many and predict_many return serial results in input order"""
    splits = [sequence_service.split_train_test(seq, 0.8) for seq in (poisson_sequence, poisson_sequence)]
    histories, tests = [s[0] for s in splits], [s[1] for s in splits]
    checkpoints = [unit_rate_checkpoint, unit_rate_checkpoint]

    serial = evaluation_service.evaluate_many(checkpoints, histories, tests, names=["a", "b"])
    pooled = evaluation_service.evaluate_many(checkpoints, histories, tests, names=["a", "b"], threads=2)
    assert [r.model for r in pooled] == ["a", "b"]
    assert [r.model_dump_json() for r in pooled] == [r.model_dump_json() for r in serial]

    one = list(evaluation_service.predict_many(unit_rate_checkpoint, histories, tests))
    many = list(evaluation_service.predict_many(unit_rate_checkpoint, histories, tests, threads=2))
    assert [k for k, _, _ in many] == [k for k, _, _ in one]
    for (_, t_a, a), (_, t_b, b) in zip(one, many):
        assert np.array_equal(t_a, t_b)
        assert np.array_equal(a.predicted_time, b.predicted_time)


@pytest.mark.parametrize("model", [ConstantHazard(4), ExponentialHazard(4)])
def test_bisection_matches_closed_form_for_random_parameters(evaluation_service, rng, model):
    """Test root finding against the closed form over 1000 random parameterizations"""
    for _ in range(50):
        params = {"hazard.v": rng.uniform(-0.1, 0.1, size=4), "hazard.b": np.array(rng.uniform(-0.5, 0.5))}
        if model.kind == "exponential":
            params["hazard.w"] = np.array(rng.uniform(-0.3, 1.0))
        evaluator = HazardEvaluator(model, params)
        h = rng.uniform(-1.0, 1.0, size=(20, 4))
        last_times = rng.uniform(0.0, 10.0, size=20)

        exact = evaluation_service.predict_median(evaluator, h, last_times, tol=1e-12)
        assert exact.converged.all()
        assert np.all(np.abs(exact.predicted_time - last_times - model.closed_form_median(params, h)) < 1e-9)

        default = evaluation_service.predict_median(evaluator, h, last_times)
        assert default.converged.all()
        residual = evaluator.cumulative(default.predicted_time - last_times, h) - LOG_TWO
        assert np.all(np.abs(residual) < 1e-9)
