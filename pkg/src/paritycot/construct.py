"""Explicit weights that solve parity without chain-of-thought, plus verifiers.

The construction reads the secret bits at the separator position ``n+1``:

* attention scores the query ``e(n+1, 0)`` against ``V``, a vector with
  ``<V, e(j, b)> = 1`` for every secret ``j`` and either bit, so after a
  large ``margin`` the column is (almost) uniform over the k secret rows;
* the FFN reads ``<U, attention output>`` where ``<U, e(j, b)> = 1`` only for
  secret ``j`` with ``b = 1``, which recovers ``s / k`` for ``s`` the number of
  ones among the secret bits;
* a bank of ``2m = 2(k+1)`` ReLUs with staggered offsets turns ``s`` into the
  triangle wave ``(-1)^(s+1)``.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from paritycot.numerics import RngStream
from paritycot.parity_data import MAX_ENUMERATION_N, ParityTask, all_inputs, complete_inputs
from paritycot.simplified import EmbeddingTable, SimplifiedParams, forward_batch

MAX_CONDITION = 1e8
MAX_EXHAUSTIVE_N = 20
BLOCK_SIZE = 4096


class IllConditionedEmbeddings(ValueError):
    """The secret-index embeddings are (nearly) linearly dependent."""


def readout_offsets(k: int) -> np.ndarray:
    """Offsets a_1..a_2m of the triangle-wave ReLU bank (m = k + 1)."""
    if k < 1:
        raise ValueError("k must be positive")
    m = k + 1
    a = np.empty(2 * m)
    for r in range(1, 2 * m + 1):
        if r <= m:
            a[r - 1] = -4 * math.ceil(r / 2) + 4
        elif r == m + 1:
            a[r - 1] = 1
        else:
            a[r - 1] = -4 * ((r - m) // 2) + 2
    return a


def readout_signs(k: int) -> np.ndarray:
    m = k + 1
    return np.concatenate([np.ones(m), -np.ones(m)])


def triangle_readout(s: int, k: int) -> float:
    """sum_{r<=m} ReLU(a_r + 2s) - sum_{r>m} ReLU(a_r + 2s); equals (-1)^(s+1)."""
    if not 0 <= s <= k:
        raise ValueError(f"s must lie in [0, {k}], got {s}")
    a = readout_offsets(k)
    return float(readout_signs(k) @ np.maximum(a + 2 * s, 0.0))


@dataclass
class ConstructionSpec:
    d: int
    m: int
    margin: float
    M: np.ndarray  # (2k, d): rows e(S_j, 0), e(S_j, 1) in secret order
    u: np.ndarray  # (k, 2, d): dual vectors, <u[j][b], e(S_j', b')> = 1{(j,b) = (j',b')}
    v: np.ndarray  # (k, d): u[j][0] + u[j][1]
    U: np.ndarray  # (d,)
    V: np.ndarray  # (d,)
    a: np.ndarray  # (2m,)
    b: np.ndarray  # (2m,)
    h: np.ndarray  # (2m,)
    condition: float


def default_margin(n: int) -> float:
    return 40.0 * math.log(n)


def build_construction(task: ParityTask, emb: EmbeddingTable, margin: float | None = None) -> ConstructionSpec:
    n, k = task.n, task.k
    d = emb.d
    if emb.T < n + 1:
        raise ValueError(f"embedding table covers {emb.T} positions, need at least {n + 1}")
    margin = default_margin(n) if margin is None else float(margin)
    M = np.stack([emb.vector(j, b) for j in task.secret for b in (0, 1)])
    gram = M @ M.T
    condition = float(np.linalg.cond(gram)) if 2 * k <= d else math.inf
    if not condition < MAX_CONDITION:
        raise IllConditionedEmbeddings(
            f"secret embeddings are ill-conditioned (cond(M M^T) = {condition:.3g}); "
            "use a larger d or draw new embeddings with another seed")
    # u = M^T (M M^T)^{-1} o for every basis vector o at once (LU with partial pivoting)
    duals = np.linalg.solve(gram, np.eye(2 * k))
    u = (M.T @ duals).T.reshape(k, 2, d)
    v = u[:, 0] + u[:, 1]
    m = k + 1
    return ConstructionSpec(d=d, m=m, margin=margin, M=M, u=u, v=v, U=u[:, 1].sum(axis=0),
                            V=v.sum(axis=0), a=readout_offsets(k), b=np.full(2 * m, 2.0 * k),
                            h=readout_signs(k), condition=condition)


def params_from_construction(spec: ConstructionSpec, emb: EmbeddingTable, n: int) -> SimplifiedParams:
    query = emb.vector(n + 1, 0)
    A = spec.margin * np.outer(spec.V, query)
    W = np.zeros((2 * spec.m, 2 * spec.d))
    W[:, : spec.d] = np.outer(spec.a, query)
    W[:, spec.d :] = np.outer(spec.b, spec.U)
    return SimplifiedParams(A, W, spec.h)


def build_parity_weights(task: ParityTask, emb: EmbeddingTable, margin: float | None = None) -> SimplifiedParams:
    """SimplifiedParams whose output at position n+1 is ~(-1)^(parity+1)."""
    return params_from_construction(build_construction(task, emb, margin), emb, task.n)


@dataclass
class VerificationReport:
    mode: str
    inputs_tested: int
    accuracy: float
    min_margin: float
    max_leak: float
    claims: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.claims.values())

    def to_dict(self) -> dict:
        return {"mode": self.mode, "inputs_tested": self.inputs_tested, "accuracy": self.accuracy,
                "min_margin": self.min_margin, "max_leak": self.max_leak,
                "claims": dict(self.claims), "details": dict(self.details), "passed": self.passed}


def _score_block(params: SimplifiedParams, emb: EmbeddingTable, task: ParityTask, inputs: np.ndarray):
    seqs = complete_inputs(task, inputs, cot=False)
    trace = forward_batch(params, emb, seqs)
    col = task.n  # 0-based column of position n+1
    y = trace.y[:, col]
    correct = int(((y > 0).astype(np.int8) == seqs[:, -1]).sum())
    secret_rows = [j - 1 for j in task.secret]
    leak = 1.0 - trace.P[:, secret_rows, col].sum(axis=1)
    return correct, float(np.abs(y).min()), float(leak.max())


def _score_block_star(args):
    return _score_block(*args)


def verify_perfect_accuracy(params: SimplifiedParams, emb: EmbeddingTable, task: ParityTask,
                            mode: str = "exhaustive", samples: int = 4096,
                            rng: RngStream | None = None, workers: int = 1) -> VerificationReport:
    """Compare the sign of y[n+1] against the parity on every (or sampled) input.

    ``max_leak`` is the largest softmax mass that column n+1 puts outside the
    secret rows.  Blocks are scored independently and merged in block order,
    so the report does not depend on ``workers``.
    """
    if mode == "exhaustive":
        if task.n > min(MAX_EXHAUSTIVE_N, MAX_ENUMERATION_N):
            raise ValueError(f"exhaustive verification needs n <= {MAX_EXHAUSTIVE_N}, got {task.n}")
        inputs = all_inputs(task.n)
    elif mode == "sampled":
        if rng is None:
            raise ValueError("sampled verification needs an rng")
        inputs = rng.bits((samples, task.n))
    else:
        raise ValueError(f"unknown verification mode {mode!r}")
    blocks = [inputs[s : s + BLOCK_SIZE] for s in range(0, len(inputs), BLOCK_SIZE)]
    jobs = [(params, emb, task, blk) for blk in blocks]
    if workers > 1 and len(blocks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_score_block_star, jobs))
    else:
        results = [_score_block_star(job) for job in jobs]
    correct = sum(r[0] for r in results)
    accuracy = correct / len(inputs)
    report = VerificationReport(mode=mode, inputs_tested=len(inputs), accuracy=accuracy,
                                min_margin=min(r[1] for r in results),
                                max_leak=max(r[2] for r in results))
    report.claims["perfect_accuracy"] = correct == len(inputs)
    return report


def check_one_hot_attention(params: SimplifiedParams, emb: EmbeddingTable, task: ParityTask,
                            tol: float, batch: np.ndarray | None = None, rng: RngStream | None = None,
                            samples: int = 2048) -> VerificationReport:
    """Max over CoT positions i and keys j <= i of |P[j, i] - 1{j = S[i]}|.

    ``batch`` is a (count, n+k+1) array of CoT sequences; if omitted, fresh
    sequences are drawn from ``rng``.
    """
    if batch is None:
        if rng is None:
            raise ValueError("need either a validation batch or an rng")
        batch = complete_inputs(task, rng.bits((samples, task.n)), cot=True)
    batch = np.asarray(batch)
    if batch.shape[1] != task.seq_len(cot=True):
        raise ValueError("one-hot check needs CoT-layout sequences")
    trace = forward_batch(params, emb, batch)
    worst = 0.0
    per_position = {}
    for i in range(task.n + 1, task.n + task.k + 1):
        target = np.zeros(i)
        target[task.cot_source(i) - 1] = 1.0
        col = trace.P[:, :i, i - 1]
        dev = float(np.abs(col - target).max())
        per_position[i] = {"source": task.cot_source(i), "max_deviation": dev,
                           "min_mass_on_source": float(col[:, task.cot_source(i) - 1].min())}
        worst = max(worst, dev)
    report = VerificationReport(mode="one-hot", inputs_tested=len(batch), accuracy=float("nan"),
                                min_margin=float("nan"), max_leak=worst)
    report.details["per_position"] = per_position
    report.details["max_deviation"] = worst
    report.claims["one_hot"] = worst <= tol
    return report
