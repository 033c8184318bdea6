"""One-block simplified transformer on boolean tokens.

Model, for a token sequence ``b`` of length L::

    E      = [e(i, b[i])]_i                      d x L, frozen hypercube vectors
    P      = colsoftmax(causal(E^T A E))         L x L, column i over rows j <= i
    O      = E P                                 attention output, d x L
    y[i]   = h^T ReLU(W [E[:, i]; O[:, i]])      W is 2m x 2d, h is frozen

Only ``A`` and ``W`` train.  Because every column of ``E`` is one of the 2T
table vectors, the batched kernels work in "token space": with token ids
``t = 2*(pos-1) + bit``, scores are lookups into ``G = Etab A Etab^T`` and the
FFN projections are lookups into ``Etab W^T``.  Gradients are scattered back
onto token ids and mapped through ``Etab`` once per batch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from paritycot.numerics import RngStream, masked_softmax_columns
from paritycot.parity_data import COT, INPUT_ONLY, NOCOT, BitSequence, ParityTask

CHECKPOINT_VERSION = 1


class EmbeddingTable:
    """Frozen vectors ``e[i][b]`` for positions 1..T, stored as (T, 2, d)."""

    def __init__(self, table: np.ndarray):
        table = np.array(table, dtype=np.float64)
        if table.ndim != 3 or table.shape[1] != 2:
            raise ValueError(f"embedding table must have shape (T, 2, d), got {table.shape}")
        table.flags.writeable = False
        self.table = table
        self.flat = table.reshape(-1, table.shape[2])
        self.flat.flags.writeable = False

    @property
    def T(self) -> int:
        return self.table.shape[0]

    @property
    def d(self) -> int:
        return self.table.shape[2]

    def vector(self, position: int, bit: int) -> np.ndarray:
        """e[position][bit], 1-based position."""
        return self.table[position - 1, bit]

    def embed(self, tokens) -> np.ndarray:
        """Column matrix E(b), shape d x L."""
        ids = token_ids(np.asarray(tokens)[None, :])[0]
        return self.flat[ids].T


def token_ids(tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    L = tokens.shape[-1]
    return 2 * np.arange(L) + tokens


def init_embeddings(T: int, d: int, rng: RngStream) -> EmbeddingTable:
    if T < 1 or d < 1:
        raise ValueError("T and d must be positive")
    return EmbeddingTable(rng.rademacher(1.0 / np.sqrt(d), (T, 2, d)))


@dataclass
class SimplifiedParams:
    A: np.ndarray
    W: np.ndarray
    h: np.ndarray
    eps: float = 0.0
    nu: np.ndarray | None = None  # (2m, k, 2): nu[r, i-n-1, b] for CoT positions i
    nu_offset: int = 0  # n + 1, the position nu[:, 0] refers to

    def __post_init__(self):
        self.h = np.array(self.h, dtype=np.float64)
        self.h.flags.writeable = False
        d = self.A.shape[0]
        if self.A.shape != (d, d) or self.W.shape != (self.h.shape[0], 2 * d):
            raise ValueError(f"inconsistent shapes A={self.A.shape} W={self.W.shape} h={self.h.shape}")
        if self.h.shape[0] % 2:
            raise ValueError("FFN width 2m must be even")

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.h.shape[0] // 2

    def copy(self) -> "SimplifiedParams":
        return SimplifiedParams(self.A.copy(), self.W.copy(), self.h, self.eps,
                                None if self.nu is None else self.nu.copy(), self.nu_offset)


@dataclass
class SimplifiedGrads:
    dA: np.ndarray
    dW: np.ndarray


def init_structured_params(task: ParityTask, emb: EmbeddingTable, m: int, eps: float,
                           rng: RngStream) -> SimplifiedParams:
    """Zero attention, zero attention-output weights, and first-half FFN rows
    that are +-eps combinations of the CoT-position embeddings."""
    n, k = task.n, task.k
    if emb.T < n + k + 1:
        raise ValueError(f"embedding table covers {emb.T} positions, need {n + k + 1}")
    if m < 1 or eps <= 0:
        raise ValueError("need m >= 1 and eps > 0")
    d = emb.d
    nu = rng.rademacher(eps, (2 * m, k, 2))
    cot_vectors = emb.table[n : n + k]  # positions n+1..n+k, shape (k, 2, d)
    W = np.zeros((2 * m, 2 * d))
    W[:, :d] = np.einsum("rkb,kbd->rd", nu, cot_vectors)
    h = np.concatenate([np.full(m, 1.0 / (2 * m)), np.full(m, -1.0 / (2 * m))])
    return SimplifiedParams(np.zeros((d, d)), W, h, eps=eps, nu=nu, nu_offset=n + 1)


@dataclass
class ForwardTrace:
    """Batched forward record.  Arrays carry a leading batch axis; the
    ``E``/``attn_out``/``ffn_in`` fields are filled only for full traces and
    use the column layout (d x L) of the model equations."""

    tokens: np.ndarray  # (B, L)
    ids: np.ndarray  # (B, L) token ids into the embedding table
    scores: np.ndarray  # (B, L, L), [b, j, i]
    P: np.ndarray  # (B, L, L) column-stochastic attention
    pre: np.ndarray  # (B, L, 2m)
    gate: np.ndarray  # (B, L, 2m) bool
    y: np.ndarray  # (B, L)
    E: np.ndarray | None = None  # (B, d, L)
    attn_out: np.ndarray | None = None  # (B, d, L)
    ffn_in: np.ndarray | None = None  # (B, 2d, L)
    _proj2: np.ndarray | None = field(default=None, repr=False)  # Etab W2^T, (2T, 2m)


def forward_batch(params: SimplifiedParams, emb: EmbeddingTable, tokens, full: bool = False) -> ForwardTrace:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise ValueError(f"expected (B, L) tokens, got {tokens.shape}")
    B, L = tokens.shape
    if L > emb.T:
        raise ValueError(f"sequence length {L} exceeds embedding table length {emb.T}")
    if emb.d != params.d:
        raise ValueError(f"embedding dim {emb.d} does not match model dim {params.d}")
    d = params.d
    ids = token_ids(tokens)
    Et = emb.flat[: 2 * L]
    G = Et @ params.A @ Et.T
    scores = G[ids[:, :, None], ids[:, None, :]]
    P = masked_softmax_columns(scores)
    proj1 = Et @ params.W[:, :d].T  # (2L, 2m)
    proj2 = Et @ params.W[:, d:].T
    pre = proj1[ids] + np.swapaxes(P, 1, 2) @ proj2[ids]
    gate = pre > 0
    y = np.where(gate, pre, 0.0) @ params.h
    trace = ForwardTrace(tokens, ids, scores, P, pre, gate, y, _proj2=proj2)
    if full:
        E = np.swapaxes(Et[ids], 1, 2)
        trace.E = E
        trace.attn_out = E @ P
        trace.ffn_in = np.concatenate([E, trace.attn_out], axis=1)
    return trace


def forward(params: SimplifiedParams, emb: EmbeddingTable, seq) -> ForwardTrace:
    """Full trace for a single sequence (batch axis of size 1)."""
    bits = seq.bits if isinstance(seq, BitSequence) else np.asarray(seq)
    return forward_batch(params, emb, bits[None, :], full=True)


def hinge_loss(yhat: float, y: int) -> tuple[float, float]:
    """max((-1)^y yhat + 1, 0) and its subgradient (0 at the kink)."""
    sign = -1.0 if y else 1.0
    arg = sign * yhat + 1.0
    return (arg, sign) if arg > 0 else (0.0, 0.0)


def hinge_terms(yhat: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sign = np.where(labels == 1, -1.0, 1.0)
    arg = sign * yhat + 1.0
    active = arg > 0
    return np.where(active, arg, 0.0), np.where(active, sign, 0.0)


def scored_slots(n: int, L: int, cot: bool) -> np.ndarray:
    """0-based slots whose next token is scored: n..L-2 with CoT, n without."""
    if cot:
        if L < n + 2:
            raise ValueError(f"CoT sequence of length {L} has no scored position (n={n})")
        return np.arange(n, L - 1)
    if L != n + 2:
        raise ValueError(f"no-CoT sequences have length {n + 2}, got {L}")
    return np.array([n])


def batch_losses(trace: ForwardTrace, n: int, cot: bool) -> tuple[np.ndarray, np.ndarray]:
    """Per-sequence summed hinge loss and dLoss/dy (zero off scored slots)."""
    slots = scored_slots(n, trace.tokens.shape[1], cot)
    labels = trace.tokens[:, slots + 1]
    vals, slopes = hinge_terms(trace.y[:, slots], labels)
    dy = np.zeros_like(trace.y)
    dy[:, slots] = slopes
    return vals.sum(axis=1), dy


def sequence_loss(trace: ForwardTrace, seq: BitSequence, cot: bool) -> float:
    if seq.layout == INPUT_ONLY or (seq.layout == COT) != cot:
        raise ValueError(f"layout {seq.layout!r} inconsistent with cot={cot}")
    losses, _ = batch_losses(trace, seq.n, cot)
    return float(losses[0])


def backward_batch(params: SimplifiedParams, emb: EmbeddingTable, trace: ForwardTrace,
                   dy: np.ndarray) -> SimplifiedGrads:
    """Gradient of ``sum_b sum_i dy[b, i] * y[b, i]`` w.r.t. A and W."""
    B, L = trace.tokens.shape
    d = params.d
    nt = 2 * L
    Et = emb.flat[:nt]
    ids = trace.ids
    P = trace.P
    dpre = np.where(trace.gate, dy[:, :, None] * params.h[None, None, :], 0.0)  # (B, L, 2m)

    # W[:, :d] sees E[:, i]; W[:, d:] sees sum_j P[j, i] E[:, j]
    c1 = _scatter_rows(ids, dpre, nt)
    c2 = _scatter_rows(ids, P @ dpre, nt)
    dW = np.concatenate([c1.T @ Et, c2.T @ Et], axis=1)

    proj2 = trace._proj2 if trace._proj2 is not None else Et @ params.W[:, d:].T
    dP = proj2[ids] @ np.swapaxes(dpre, 1, 2)  # [b, j, i] = <W2^T dpre_i, e_j>
    dS = P * (dP - (P * dP).sum(axis=1, keepdims=True))
    pair = (ids[:, :, None] * nt + ids[:, None, :]).ravel()
    C = np.bincount(pair, weights=dS.ravel(), minlength=nt * nt).reshape(nt, nt)
    dA = Et.T @ C @ Et
    return SimplifiedGrads(dA, dW)


def _scatter_rows(ids: np.ndarray, values: np.ndarray, nt: int) -> np.ndarray:
    width = values.shape[-1]
    flat_ids = ids.ravel()
    flat_vals = values.reshape(-1, width)
    out = np.empty((nt, width))
    for c in range(width):
        out[:, c] = np.bincount(flat_ids, weights=flat_vals[:, c], minlength=nt)
    return out


def backward(params: SimplifiedParams, emb: EmbeddingTable, trace: ForwardTrace, seq: BitSequence,
             cot: bool) -> SimplifiedGrads:
    """Exact gradient of the single-sequence hinge loss."""
    _, dy = batch_losses(trace, seq.n, cot)
    return backward_batch(params, emb, trace, dy)


def batch_loss_and_grads(params: SimplifiedParams, emb: EmbeddingTable, task: ParityTask,
                         batch: np.ndarray, cot: bool) -> tuple[float, SimplifiedGrads, ForwardTrace]:
    """Batch-mean of per-sequence losses, with its gradient."""
    trace = forward_batch(params, emb, batch)
    losses, dy = batch_losses(trace, task.n, cot)
    grads = backward_batch(params, emb, trace, dy / len(batch))
    return float(losses.mean()), grads, trace


def predict(trace: ForwardTrace, position: int, row: int = 0) -> int:
    """1 iff the output at the 1-based ``position`` is strictly positive."""
    return int(trace.y[row, position - 1] > 0)


def autoregressive_batch(params: SimplifiedParams, emb: EmbeddingTable, task: ParityTask,
                         inputs: np.ndarray, cot: bool) -> np.ndarray:
    """Greedy completion of (count, n) input prefixes; returns full sequences."""
    inputs = np.asarray(inputs, dtype=np.int8)
    count, n = inputs.shape
    steps = task.k if cot else 1
    seqs = np.zeros((count, n + 1 + steps), dtype=np.int8)
    seqs[:, :n] = inputs
    for s in range(steps):
        L = n + 1 + s
        trace = forward_batch(params, emb, seqs[:, :L])
        seqs[:, L] = trace.y[:, L - 1] > 0
    return seqs


def autoregressive_complete(params: SimplifiedParams, emb: EmbeddingTable, task: ParityTask,
                            input_prefix, cot: bool = True) -> tuple[BitSequence, int]:
    prefix = np.asarray(input_prefix, dtype=np.int8)
    if prefix.shape != (task.n,):
        raise ValueError(f"expected {task.n} input bits, got shape {prefix.shape}")
    seq = autoregressive_batch(params, emb, task, prefix[None, :], cot)[0]
    layout = COT if cot else NOCOT
    return BitSequence(seq, layout, task.n), int(seq[-1])


def save_checkpoint(path, params: SimplifiedParams, emb: EmbeddingTable, *, n: int, k: int,
                    seed: int) -> None:
    meta = {"format_version": CHECKPOINT_VERSION, "kind": "simplified", "n": n, "k": k,
            "d": params.d, "m": params.m, "eps": params.eps, "seed": seed,
            "nu_offset": params.nu_offset}
    arrays = {"A": params.A, "W": params.W, "h": params.h, "embedding": emb.table}
    if params.nu is not None:
        arrays["nu"] = params.nu
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path) -> tuple[SimplifiedParams, EmbeddingTable, dict]:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format_version") != CHECKPOINT_VERSION or meta.get("kind") != "simplified":
            raise ValueError(f"{path}: not a simplified-model checkpoint (meta={meta})")
        nu = z["nu"].copy() if "nu" in z.files else None
        params = SimplifiedParams(z["A"].copy(), z["W"].copy(), z["h"].copy(), eps=meta["eps"],
                                  nu=nu, nu_offset=meta["nu_offset"])
        emb = EmbeddingTable(z["embedding"])
    return params, emb, meta
