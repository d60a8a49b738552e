"""robinlab: a desk-scale adversarial-robustness workbench.

Training (standard, adversarial, TRADES, MART), l2/linf PGD and CW attacks,
one-vs-all binary aggregation (RoBin) with its attack suite, and
gradient-alignment analysis, all on a small self-contained float64
autodiff engine.
"""

__version__ = "0.1.0"

from . import analysis, attacks, autodiff, data, models, training  # noqa: F401
from . import aggregate  # noqa: F401
