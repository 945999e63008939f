"""Digital twin for a signalized road network.

A mesoscopic point-queue simulator stands in for the physical world; virtual
sensors aggregate 5-minute traffic measurements into a data lake; LSTM/BiLSTM
forecasters predict next-window flow; a drift-aware MLOps loop retrains and
promotes model versions; the twin manager runs operator what-if scenarios on
forked simulations and actuates validated interventions back into the
"physical" network.
"""

from . import (
    audit,
    datalake,
    fixtures,
    mlops,
    network,
    predictor,
    sensing,
    simulator,
    twin,
)
from .errors import DigitError

__version__ = "0.1.0"

__all__ = [
    "DigitError",
    "audit",
    "datalake",
    "fixtures",
    "mlops",
    "network",
    "predictor",
    "sensing",
    "simulator",
    "twin",
    "__version__",
]
