"""Gradient-free training of small recurrent networks for volatility forecasting.

Evolution strategies and particle swarm optimisation act on flat weight
vectors of LSTM, phased-LSTM and Fourier recurrent cells; a truncated-BPTT
Adam baseline and a budget-matched benchmark harness sit alongside.
"""

from .cells import CellSpec, forward_sequence, layout_for
from .core import BudgetExhausted, BudgetMeter, CounterRng, LossSpec, Scorer
from .data import SynthConfig, build_dataset, compute_rv, generate_synthetic, load_csv
from .optim import EsConfig, NpsoConfig, SgdConfig, es_step, npso_step, sgd_train, train_es, train_npso

__version__ = "0.1.0"
