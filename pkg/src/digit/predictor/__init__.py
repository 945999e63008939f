"""Traffic-flow forecasters: from-scratch LSTM and BiLSTM with BPTT training,
gradient verification, and the RMSE/MAE/MAPE evaluation suite."""

from .checkpoint import (
    checkpoint_from_dict,
    checkpoint_to_dict,
    load_checkpoint,
    save_checkpoint,
)
from .nets import (
    LstmParams,
    analytic_gradients,
    bilstm_forward,
    gradient_check,
    init_lstm_params,
    lstm_forward,
    max_relative_error,
    numeric_gradients,
)
from .training import (
    AdamState,
    EpochLog,
    EvalMetrics,
    Forecast,
    Hyper,
    TrainedModel,
    encode_window,
    evaluate,
    metrics_from_predictions,
    predict,
    predict_multi,
    train,
)

__all__ = [
    "AdamState",
    "EpochLog",
    "EvalMetrics",
    "Forecast",
    "Hyper",
    "LstmParams",
    "TrainedModel",
    "analytic_gradients",
    "bilstm_forward",
    "checkpoint_from_dict",
    "checkpoint_to_dict",
    "encode_window",
    "evaluate",
    "gradient_check",
    "init_lstm_params",
    "load_checkpoint",
    "lstm_forward",
    "max_relative_error",
    "metrics_from_predictions",
    "numeric_gradients",
    "predict",
    "predict_multi",
    "save_checkpoint",
    "train",
]
