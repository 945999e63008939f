"""BPTT gradient verification against central finite differences."""
import numpy as np
import pytest

from digit.predictor import (
    analytic_gradients,
    gradient_check,
    init_lstm_params,
    max_relative_error,
    numeric_gradients,
)


def sample(rng, steps=15):
    return rng.standard_normal((steps, 1)), float(rng.standard_normal())


def params_for(kind, rng, hidden):
    if kind == "lstm":
        return (init_lstm_params(rng, 1, hidden),)
    return (init_lstm_params(rng, 1, hidden), init_lstm_params(rng, 1, hidden))


@pytest.mark.parametrize("kind", ["lstm", "bilstm"])
@pytest.mark.parametrize("hidden", [2, 4, 8])
def test_gradient_check_small(kind, hidden):
    rng = np.random.default_rng(hidden * 101 + (0 if kind == "lstm" else 1))
    params = params_for(kind, rng, hidden)
    x, y = sample(rng, steps=8)  # shorter horizon keeps module tests quick
    assert gradient_check(kind, params, (x, y)) < 1e-4


def test_gradient_check_detects_zeroed_gradient():
    """Mutation test: zeroing one analytic gradient term must blow the error up."""
    rng = np.random.default_rng(3)
    params = params_for("lstm", rng, 4)
    x, y = sample(rng, steps=8)
    analytic = analytic_gradients("lstm", params, x, y)
    numeric = numeric_gradients("lstm", params, x, y)
    honest = max_relative_error(analytic, numeric)
    assert honest < 1e-4
    corrupted = ({k: (np.zeros_like(v) if k == "U_f" else v)
                  for k, v in analytic[0].items()},)
    assert max_relative_error(corrupted, numeric) > 1e-2


def test_zero_params_head_bias_gradient():
    """With all-zero parameters the prediction is 0, so d(mse)/d b_out =
    2*(0 - y)*1; finite differences agree."""
    from tests.test_predictor_forward import zero_params
    params = (zero_params(3),)
    x = np.ones((15, 1))
    y = 2.5
    analytic = analytic_gradients("lstm", params, x, y)
    assert analytic[0]["b_out"] == pytest.approx(2 * (0.0 - y))
    numeric = numeric_gradients("lstm", params, x, y)
    assert max_relative_error(analytic, numeric) < 1e-4
