"""ctypes loader for the native alignment kernel.

Wraps the cdylib built from this crate and exposes the same batch interface
the reference implementation defines, so it can be installed as a drop-in
replacement:

    from alignkernel.kernel import install
    install()   # vpd.align now routes batch_pairwise_costs through the kernel

The boundary is dense row-major float32 matrices in, float64 costs out;
infeasible alignments come back as IEEE +infinity.
"""

from __future__ import annotations

import ctypes
from pathlib import Path

import numpy as np

_LIB_CANDIDATES = (
    "target/release/libalignkernel.so",
    "target/debug/libalignkernel.so",
)


def find_library() -> Path | None:
    here = Path(__file__).resolve().parent
    for rel in _LIB_CANDIDATES:
        candidate = here / rel
        if candidate.exists():
            return candidate
    return None


class AlignKernel:
    def __init__(self, path: Path):
        self._lib = ctypes.CDLL(str(path))
        self._lib.vpd_dtw_cost.restype = ctypes.c_double
        self._lib.vpd_dtw_cost.argtypes = [
            ctypes.POINTER(ctypes.c_float),
            ctypes.c_uint64,
            ctypes.POINTER(ctypes.c_float),
            ctypes.c_uint64,
            ctypes.c_uint64,
        ]
        self._lib.vpd_batch_pairwise.restype = ctypes.c_int32
        self._lib.vpd_batch_pairwise.argtypes = [
            ctypes.POINTER(ctypes.c_float),
            ctypes.POINTER(ctypes.c_uint64),
            ctypes.c_uint64,
            ctypes.POINTER(ctypes.c_float),
            ctypes.POINTER(ctypes.c_uint64),
            ctypes.c_uint64,
            ctypes.c_uint64,
            ctypes.POINTER(ctypes.c_double),
        ]

    @staticmethod
    def _flatten(sequences) -> tuple[np.ndarray, np.ndarray, int]:
        arrays = [np.ascontiguousarray(s, dtype=np.float32) for s in sequences]
        if not arrays:
            raise ValueError("empty sequence list")
        dims = {a.shape[1] for a in arrays}
        if len(dims) != 1:
            raise ValueError(f"inconsistent dims: {sorted(dims)}")
        lens = np.asarray([len(a) for a in arrays], dtype=np.uint64)
        if lens.min() == 0:
            raise ValueError("empty sequence")
        flat = np.concatenate([a.reshape(-1) for a in arrays])
        return flat, lens, dims.pop()

    def dtw_cost_fast(self, a: np.ndarray, b: np.ndarray) -> float:
        a = np.ascontiguousarray(a, dtype=np.float32)
        b = np.ascontiguousarray(b, dtype=np.float32)
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
            raise ValueError("sequences must be 2-D with equal dims")
        if len(a) == 0 or len(b) == 0:
            raise ValueError("empty sequence")
        return float(
            self._lib.vpd_dtw_cost(
                a.ctypes.data_as(ctypes.POINTER(ctypes.c_float)),
                a.shape[0],
                b.ctypes.data_as(ctypes.POINTER(ctypes.c_float)),
                b.shape[0],
                a.shape[1],
            )
        )

    def batch_pairwise_costs(self, queries, index) -> np.ndarray:
        q_flat, q_lens, q_dim = self._flatten(queries)
        i_flat, i_lens, i_dim = self._flatten(index)
        if q_dim != i_dim:
            raise ValueError(f"dims differ: {q_dim} vs {i_dim}")
        out = np.empty(len(q_lens) * len(i_lens), dtype=np.float64)
        status = self._lib.vpd_batch_pairwise(
            q_flat.ctypes.data_as(ctypes.POINTER(ctypes.c_float)),
            q_lens.ctypes.data_as(ctypes.POINTER(ctypes.c_uint64)),
            len(q_lens),
            i_flat.ctypes.data_as(ctypes.POINTER(ctypes.c_float)),
            i_lens.ctypes.data_as(ctypes.POINTER(ctypes.c_uint64)),
            len(i_lens),
            q_dim,
            out.ctypes.data_as(ctypes.POINTER(ctypes.c_double)),
        )
        if status != 0:
            raise RuntimeError(f"kernel rejected the batch (status {status})")
        return out.reshape(len(q_lens), len(i_lens))


def load(path: Path | None = None) -> AlignKernel | None:
    path = path or find_library()
    if path is None:
        return None
    return AlignKernel(path)


def install(path: Path | None = None) -> AlignKernel:
    """Route vpd.align batch costs through the native kernel."""
    from vpd import align

    kernel = load(path)
    if kernel is None:
        raise FileNotFoundError(
            "alignkernel cdylib not found; build it with `cargo build --release`"
        )
    align.set_fast_kernel(kernel.batch_pairwise_costs)
    return kernel
