"""Leading-eigenvector estimation from single uniformly sampled matrix entries."""

from .linalg import (
    ConvergenceError,
    EigenDecomposition,
    NormalizationError,
    SymmetricMatrix,
    eig_all,
    jacobi_eigh,
    read_matrix,
    spectral_normalize,
    write_matrix,
)
from .sampler import EntrySample, EntryStream, RngStream, sample_entry, stream_open, write_triplets
from .sgd import EntrySampledPCA, Iterate, RunResult, TraceRecord, run_fixed, sgd_step
from .hedge import HedgeConfig, HedgeTunedPCA, burn_in, finalize, post_burn_in_run
from .theory import certify_theorem, propagate_ebt, theorem_params

__version__ = "0.1.0"
