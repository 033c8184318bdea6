"""Parity sequences with and without chain-of-thought.

Positions are 1-based in every public field (``secret``, ``order``, file
formats).  Bit arrays are ordinary numpy arrays, so ``bits[i - 1]`` holds
token ``b[i]``.

Layouts, for an ``(n, k)`` task:

* ``nocot``  -- ``b[1..n]`` inputs, ``b[n+1] = 0``, ``b[n+2]`` = parity (length n+2)
* ``cot``    -- inputs, ``b[n+1] = 0``, then ``b[i+1] = b[i] xor b[S[i]]``
  for ``i = n+1..n+k`` (length n+k+1); the last token is the parity
* ``input``  -- inputs plus the 0 separator (length n+1), the decoding prompt
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from paritycot.numerics import RngStream

NOCOT = "nocot"
COT = "cot"
INPUT_ONLY = "input"
LAYOUTS = (NOCOT, COT, INPUT_ONLY)
MAX_ENUMERATION_N = 24
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ParityTask:
    n: int
    k: int
    secret: tuple[int, ...]
    order: tuple[int, ...]

    def __post_init__(self):
        if not 1 <= self.k <= self.n:
            raise ValueError(f"need 1 <= k <= n, got n={self.n}, k={self.k}")
        if len(set(self.secret)) != self.k or len(self.secret) != self.k:
            raise ValueError(f"secret must hold {self.k} distinct indices: {self.secret}")
        if any(not 1 <= j <= self.n for j in self.secret):
            raise ValueError(f"secret indices must lie in [1, {self.n}]: {self.secret}")
        if tuple(sorted(self.secret)) != tuple(self.secret):
            raise ValueError("secret must be sorted ascending")
        if sorted(self.order) != list(self.secret):
            raise ValueError(f"order {self.order} is not a permutation of {self.secret}")

    @classmethod
    def from_secret(cls, n: int, secret, order=None) -> "ParityTask":
        secret = tuple(sorted(int(j) for j in secret))
        order = secret if order is None else tuple(int(j) for j in order)
        return cls(n=n, k=len(secret), secret=secret, order=order)

    def seq_len(self, cot: bool) -> int:
        return self.n + self.k + 1 if cot else self.n + 2

    def cot_source(self, position: int) -> int:
        """S[i]: the secret index consumed at CoT position i (1-based)."""
        if not self.n + 1 <= position <= self.n + self.k:
            raise ValueError(f"position {position} is not a CoT step")
        return self.order[position - self.n - 1]

    def scored_positions(self, cot: bool) -> list[int]:
        """1-based positions whose next token is scored by the loss."""
        if cot:
            return list(range(self.n + 1, self.n + self.k + 1))
        return [self.n + 1]


@dataclass
class BitSequence:
    bits: np.ndarray
    layout: str
    n: int

    def __post_init__(self):
        raw = np.asarray(self.bits)
        if raw.size and not np.isin(raw, (0, 1)).all():
            raise ValueError("every token must be 0 or 1")
        self.bits = raw.astype(np.int8)
        if self.layout not in LAYOUTS:
            raise ValueError(f"unknown layout {self.layout!r}")

    def __len__(self) -> int:
        return len(self.bits)

    def __getitem__(self, i: int) -> int:
        """1-based token access."""
        if not 1 <= i <= len(self.bits):
            raise IndexError(f"position {i} outside [1, {len(self.bits)}]")
        return int(self.bits[i - 1])

    @property
    def inputs(self) -> np.ndarray:
        return self.bits[: self.n]

    def to_line(self) -> str:
        return "".join("1" if b else "0" for b in self.bits)


@dataclass
class DatasetMeta:
    n: int
    k: int
    secret: list[int]
    order: list[int]
    cot: bool
    count: int
    seed: int
    format_version: int = FORMAT_VERSION

    def task(self) -> ParityTask:
        return ParityTask.from_secret(self.n, self.secret, self.order)


def sample_secret_set(n: int, k: int, rng: RngStream, random_order: bool = False) -> ParityTask:
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got n={n}, k={k}")
    secret = tuple(sorted(int(j) + 1 for j in rng.choice(n, k)))
    if random_order:
        order = tuple(secret[i] for i in rng.permutation(k))
    else:
        order = secret
    return ParityTask(n=n, k=k, secret=secret, order=order)


def parity_eval(task: ParityTask, input_bits) -> int:
    x = np.asarray(input_bits)
    if x.shape != (task.n,):
        raise ValueError(f"expected {task.n} input bits, got shape {x.shape}")
    return int(x[[j - 1 for j in task.secret]].sum() % 2)


def parity_batch(task: ParityTask, inputs: np.ndarray) -> np.ndarray:
    idx = [j - 1 for j in task.secret]
    return (inputs[:, idx].sum(axis=1) % 2).astype(np.int8)


def complete_inputs(task: ParityTask, inputs: np.ndarray, cot: bool) -> np.ndarray:
    """Ground-truth sequences (count x T) for a batch of input prefixes."""
    inputs = np.asarray(inputs, dtype=np.int8)
    if inputs.ndim != 2 or inputs.shape[1] != task.n:
        raise ValueError(f"expected (count, {task.n}) inputs, got {inputs.shape}")
    count, n = inputs.shape
    out = np.zeros((count, task.seq_len(cot)), dtype=np.int8)
    out[:, :n] = inputs
    if cot:
        for step, src in enumerate(task.order):
            i = n + step  # 0-based slot of b[n+1+step]
            out[:, i + 1] = out[:, i] ^ inputs[:, src - 1]
    else:
        out[:, n + 1] = parity_batch(task, inputs)
    return out


def gen_batch(task: ParityTask, cot: bool, rng: RngStream, count: int) -> np.ndarray:
    inputs = rng.bits((count, task.n))
    return complete_inputs(task, inputs, cot)


def gen_sequence(task: ParityTask, cot: bool, rng: RngStream) -> BitSequence:
    bits = gen_batch(task, cot, rng, 1)[0]
    return BitSequence(bits, COT if cot else NOCOT, task.n)


def verify_sequence(task: ParityTask, seq: BitSequence) -> bool:
    cot = seq.layout == COT
    if seq.layout == INPUT_ONLY or len(seq) != task.seq_len(cot) or seq.n != task.n:
        return False
    if np.any((seq.bits != 0) & (seq.bits != 1)):
        return False
    expected = complete_inputs(task, seq.inputs[None, :], cot)[0]
    return bool(np.array_equal(expected, seq.bits))


def enumerate_inputs(n: int):
    """Yield all 2^n input prefixes as tuples, in lexicographic order."""
    if n > MAX_ENUMERATION_N:
        raise ValueError(f"refusing to enumerate 2^{n} inputs (limit n <= {MAX_ENUMERATION_N})")
    if n < 1:
        raise ValueError("n must be positive")
    yield from itertools.product((0, 1), repeat=n)


def all_inputs(n: int) -> np.ndarray:
    """Array form of :func:`enumerate_inputs`, shape (2^n, n), same order."""
    if n > MAX_ENUMERATION_N:
        raise ValueError(f"refusing to enumerate 2^{n} inputs (limit n <= {MAX_ENUMERATION_N})")
    codes = np.arange(2**n, dtype=np.int64)
    shifts = np.arange(n - 1, -1, -1)
    return ((codes[:, None] >> shifts) & 1).astype(np.int8)


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def write_dataset(path, sequences: np.ndarray, meta: DatasetMeta) -> None:
    sequences = np.asarray(sequences)
    if meta.count < 1 or len(sequences) != meta.count:
        raise ValueError(f"dataset count must be >= 1 and match meta (got {len(sequences)})")
    task = meta.task()
    T = task.seq_len(meta.cot)
    if sequences.ndim != 2 or sequences.shape[1] != T:
        raise ValueError(f"sequences must have length {T}")
    lines = ["".join("1" if b else "0" for b in row) for row in sequences]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    sidecar_path(path).write_text(json.dumps(asdict(meta), indent=2, sort_keys=True) + "\n")


def read_dataset(path) -> tuple[np.ndarray, DatasetMeta]:
    raw = json.loads(sidecar_path(path).read_text())
    meta = DatasetMeta(**raw)
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    rows = np.array([[1 if c == "1" else 0 for c in line] for line in lines], dtype=np.int8)
    if len(rows) != meta.count:
        raise ValueError(f"{path}: {len(rows)} sequences but metadata says {meta.count}")
    task = meta.task()
    for row in rows:
        if not verify_sequence(task, BitSequence(row, COT if meta.cot else NOCOT, task.n)):
            raise ValueError(f"{path}: sequence {''.join(map(str, row))} inconsistent with metadata")
    return rows, meta
