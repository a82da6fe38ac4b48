"""Event-based GRU inference and a many-core neuromorphic chip simulator."""

from .egru import EgruLayerParams, EgruState, egru_step, run_layer
from .manycore import BudgetExceeded, PeBudget, Simulator, plan_partition, plan_stack, run_sequence
from .profiler import CostModel, StageCounters, build_report
from .sparse import CsrMatrix, DimensionError, EventVector, csr_from_dense, dense_matvec, event_matvec

__version__ = "0.1.0"

__all__ = [
    "BudgetExceeded", "CostModel", "CsrMatrix", "DimensionError", "EgruLayerParams", "EgruState",
    "EventVector", "PeBudget", "Simulator", "StageCounters", "build_report", "csr_from_dense",
    "dense_matvec", "egru_step", "event_matvec", "plan_partition", "plan_stack", "run_layer", "run_sequence",
]
