"""Block-sparse matrix multiplication engine and benchmark harness."""

__version__ = "0.1.0"

from .core import (BlockCsr, BlockLayout, Permutation, build_from_triplets, filter_blocks, frobenius_norm,
                   random_permutation, read_bsm, to_blocks, to_dense, write_bsm)
from .dist import ProcessGrid, cannon_multiply, distribute, gather
from .errors import (BsmmError, ConstructionError, FormatError, IntegrityError, ParameterError,
                     UsageError)
from .kernels import KernelKey, KernelTable, gemm_acc, microbench
from .local_mm import count_flops, multiply_local
from .matrix_gen import PRESETS, generate, occupancy, random_uniform

__all__ = [
    "BlockCsr", "BlockLayout", "Permutation", "build_from_triplets", "filter_blocks", "frobenius_norm",
    "random_permutation", "read_bsm", "to_blocks", "to_dense", "write_bsm",
    "ProcessGrid", "cannon_multiply", "distribute", "gather",
    "BsmmError", "ConstructionError", "FormatError", "IntegrityError", "ParameterError", "UsageError",
    "KernelKey", "KernelTable", "gemm_acc", "microbench",
    "count_flops", "multiply_local",
    "PRESETS", "generate", "occupancy", "random_uniform",
]
