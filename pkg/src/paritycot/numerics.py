"""Small dense kernels shared by the models: exact matmul, causal column
softmax, Shannon entropy, seeded random streams and matrix CSV I/O.

Matrices are plain 2-D ``float64`` numpy arrays.  Attention patterns use the
column convention ``P[j, i]``: column ``i`` is the distribution of query
position ``i`` over key positions ``j <= i``.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

NORMALIZATION_TOL = 1e-9


def matmul(a, b) -> np.ndarray:
    """Dense product with a fixed ascending inner-index summation order.

    Each output entry is accumulated as ``((a0*b0 + a1*b1) + a2*b2) + ...``
    with separately rounded products, so the result is bit-identical to the
    textbook triple loop.  Use ``@`` for bulk work; this kernel exists for
    callers that need the exact order.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"shape mismatch: {a.shape} @ {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += np.multiply.outer(a[:, k], b[k, :])
    return out


def causal_mask(T: int) -> np.ndarray:
    """Boolean T x T mask, True where key row j <= query column i."""
    return np.triu(np.ones((T, T), dtype=bool))


def masked_softmax_columns(scores) -> np.ndarray:
    """Softmax of each column over the rows ``j <= i``; masked rows are 0.

    Works on a single ``T x T`` matrix or on a stack ``(..., T, T)``.  Masked
    entries are never exponentiated, so ``-inf`` never enters the arithmetic.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim < 2 or scores.shape[-1] != scores.shape[-2]:
        raise ValueError(f"expected square score matrices, got {scores.shape}")
    T = scores.shape[-1]
    mask = causal_mask(T)
    masked = np.where(mask, scores, -np.inf)
    col_max = masked.max(axis=-2, keepdims=True)
    shifted = np.where(mask, scores - col_max, 0.0)
    ex = np.where(mask, np.exp(shifted), 0.0)
    return ex / ex.sum(axis=-2, keepdims=True)


def shannon_entropy(p) -> float:
    """Entropy in nats with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("probability vector has a negative entry")
    total = p.sum()
    if abs(total - 1.0) > NORMALIZATION_TOL:
        raise ValueError(f"probability vector sums to {total!r}, not 1")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def derive_seed(*keys) -> int:
    """Stable 64-bit seed from an arbitrary tuple of ints/strings."""
    h = hashlib.blake2b(repr(tuple(keys)).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


class RngStream:
    """Reproducible random stream keyed by ``(seed, stream_id)``.

    Backed by numpy's PCG64 seeded through ``SeedSequence``; the output for a
    given key is identical on every platform numpy supports.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        self.gen = np.random.Generator(np.random.PCG64(ss))
        self.counter = 0

    def bits(self, size) -> np.ndarray:
        out = self.gen.integers(0, 2, size=size, dtype=np.int8)
        self.counter += out.size
        return out

    def bit(self) -> int:
        return int(self.bits(1)[0])

    def index(self, high: int, size=None):
        """Uniform integer in ``[0, high)``."""
        out = self.gen.integers(0, high, size=size)
        self.counter += 1 if size is None else int(np.prod(size))
        return out

    def rademacher(self, c: float, size) -> np.ndarray:
        signs = self.gen.integers(0, 2, size=size) * 2 - 1
        self.counter += signs.size
        return c * signs.astype(np.float64)

    def normal(self, std: float, size) -> np.ndarray:
        out = self.gen.normal(0.0, std, size=size)
        self.counter += out.size
        return out

    def permutation(self, n: int) -> np.ndarray:
        self.counter += n
        return self.gen.permutation(n)

    def choice(self, n: int, k: int) -> np.ndarray:
        """k distinct values from ``range(n)``, uniformly."""
        self.counter += k
        return self.gen.choice(n, size=k, replace=False)

    def spawn(self, stream_id: int) -> "RngStream":
        return RngStream(derive_seed(self.seed, self.stream_id, stream_id), 0)


def rng_stream(seed: int, stream_id: int = 0) -> RngStream:
    return RngStream(seed, stream_id)


def format_float(x: float) -> str:
    # repr is the shortest string that round-trips a float64
    return repr(float(x))


def save_matrix_csv(matrix, path) -> None:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {matrix.shape}")
    lines = [",".join(format_float(v) for v in row) for row in matrix]
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write matrix CSV to {path}: {exc}") from exc


def load_matrix_csv(path) -> np.ndarray:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read matrix CSV from {path}: {exc}") from exc
    rows = [[float(v) for v in line.split(",")] for line in text.splitlines() if line]
    return np.array(rows, dtype=np.float64)

