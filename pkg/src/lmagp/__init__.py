"""GP regression with a low-rank plus block-Markov residual approximation."""

from .baselines import Prediction, fgp_predict, pic_predict_direct
from .blockmat import (
    BlockMatrix,
    CholeskyFactor,
    IllConditionedSupportError,
    NotPositiveDefiniteError,
    NumericalError,
    banded_inverse_cholesky,
    cholesky_jittered,
    kl_distance,
    q_matrix,
    r_matrix,
)
from .data import Dataset, load_csv
from .kernel import Hyperparams, PointSet, gram, kernel_eval
from .lma import (
    GlobalSummary,
    LmaConfig,
    LmaWorkspace,
    LocalSummary,
    global_summary,
    lma_predict_direct,
    lma_predict_summary,
    local_summary,
)
from .parallel import (
    AbortedRunError,
    ProtocolError,
    RunStats,
    compute_rbar_cross_parallel,
    expected_message_count,
    run_parallel_lma,
    speedup_report,
)
from .partition import BlockPartition, SupportSet, partition_inputs, select_support

__version__ = "0.1.0"

__all__ = [
    "Prediction",
    "fgp_predict",
    "pic_predict_direct",
    "BlockMatrix",
    "CholeskyFactor",
    "IllConditionedSupportError",
    "NotPositiveDefiniteError",
    "NumericalError",
    "banded_inverse_cholesky",
    "cholesky_jittered",
    "kl_distance",
    "q_matrix",
    "r_matrix",
    "Dataset",
    "load_csv",
    "Hyperparams",
    "PointSet",
    "gram",
    "kernel_eval",
    "GlobalSummary",
    "LmaConfig",
    "LmaWorkspace",
    "LocalSummary",
    "global_summary",
    "lma_predict_direct",
    "lma_predict_summary",
    "local_summary",
    "AbortedRunError",
    "ProtocolError",
    "RunStats",
    "compute_rbar_cross_parallel",
    "expected_message_count",
    "run_parallel_lma",
    "speedup_report",
    "BlockPartition",
    "SupportSet",
    "partition_inputs",
    "select_support",
    "__version__",
]
