"""hierglm: hierarchical communication-efficient coordinate descent for GLMs."""

from .data import (ChunkStore, Partition, SparseColumnMatrix, parse_svmlight,
                   partition_columns, read_chunk, spectral_bound, write_chunks)
from .engine import (Engine, HierarchyConfig, StoppingCriteria, TrainResult,
                     train)
from .objectives import Model, ObjectiveSpec, duality_gap, primal_objective, \
    reference_optimum
from .solver import (DampingState, LocalSubproblem, PermutationGenerator,
                     SubtaskResult, coordinate_update, damped_solve,
                     measure_theta, scd_epoch)

__version__ = "0.1.0"

__all__ = [
    "ChunkStore", "Partition", "SparseColumnMatrix", "parse_svmlight",
    "partition_columns", "read_chunk", "spectral_bound", "write_chunks",
    "Engine", "HierarchyConfig", "StoppingCriteria", "TrainResult", "train",
    "Model", "ObjectiveSpec", "duality_gap", "primal_objective",
    "reference_optimum", "DampingState", "LocalSubproblem",
    "PermutationGenerator", "SubtaskResult", "coordinate_update",
    "damped_solve", "measure_theta", "scd_epoch", "__version__",
]
