"""Attention sparsity and training-dynamics diagnostics.

The sparsity measure is the normalized attention entropy of a causal pattern:
the minimum over query columns ``i >= 2`` of ``H(column i) / log i``, which
is 1 for uniform attention and 0 as soon as any column is one-hot.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from paritycot.numerics import NORMALIZATION_TOL, load_matrix_csv, save_matrix_csv
from paritycot.parity_data import ParityTask


@dataclass
class AttentionRecord:
    layer: int
    head: int
    input_id: int
    pattern: np.ndarray  # T x T, column i is the distribution over rows j <= i


@dataclass
class EntropyReport:
    values: dict = field(default_factory=dict)  # (layer, head) -> mean normalized entropy
    count: int = 0

    @property
    def min_entropy(self) -> float:
        return min(self.values.values())

    def write_csv(self, path) -> None:
        try:
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(["layer", "head", "mean_normalized_entropy"])
                for (layer, head), value in sorted(self.values.items()):
                    writer.writerow([layer, head, repr(float(value))])
        except OSError as exc:
            raise OSError(f"cannot write entropy report to {path}: {exc}") from exc


def _column_divergences(patterns: np.ndarray) -> np.ndarray:
    """KL(column i || uniform over rows 1..i) for every column of a (..., T, T) stack.

    Uses H(p) = log i - KL(p || uniform_i) with 0 log 0 = 0.  For a uniform
    column every term is log(p * i) ~ 0, so the normalized entropy comes out
    as exactly 1.0 instead of 1 - ulp.
    """
    T = patterns.shape[-1]
    support = np.arange(1, T + 1, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(patterns > 0, patterns * np.log(patterns * support), 0.0)
    return terms.sum(axis=-2)


def validate_pattern(pattern: np.ndarray, tol: float = NORMALIZATION_TOL) -> None:
    T = pattern.shape[-1]
    if pattern.shape[-2] != T:
        raise ValueError(f"attention pattern must be square, got {pattern.shape}")
    if np.any(pattern < 0):
        raise ValueError("attention pattern has negative entries")
    if np.any(np.tril(pattern, k=-1) != 0):
        raise ValueError("attention pattern puts mass on future positions")
    if np.any(np.abs(pattern.sum(axis=-2) - 1.0) > tol):
        raise ValueError("attention pattern columns do not sum to 1")


def normalized_attention_entropy(record, validate: bool = True) -> float:
    """min over columns i >= 2 (1-based) of H(column i) / log i."""
    pattern = record.pattern if isinstance(record, AttentionRecord) else np.asarray(record, dtype=np.float64)
    if pattern.ndim != 2:
        raise ValueError(f"expected a single T x T pattern, got shape {pattern.shape}")
    if pattern.shape[0] < 2:
        raise ValueError("normalized entropy needs T >= 2")
    if validate:
        validate_pattern(pattern)
    return float(batch_normalized_entropy(pattern[None])[0])


def batch_normalized_entropy(patterns: np.ndarray) -> np.ndarray:
    """Vectorized normalized entropy over a (N, T, T) stack, no validation."""
    T = patterns.shape[-1]
    if T < 2:
        raise ValueError("normalized entropy needs T >= 2")
    kl = _column_divergences(patterns)[..., 1:]  # columns i = 2..T
    values = 1.0 - kl / np.log(np.arange(2, T + 1))
    return np.clip(values, 0.0, 1.0).min(axis=-1)


def entropy_report_from_patterns(patterns_by_head: dict) -> EntropyReport:
    """Average normalized entropy per head; values are (N, T, T) stacks.

    The sum runs over inputs in their given order, so the result is
    reproducible bit for bit.
    """
    report = EntropyReport()
    for key in sorted(patterns_by_head):
        stack = np.asarray(patterns_by_head[key])
        if len(stack) == 0:
            raise ValueError("average entropy needs a nonempty dataset")
        report.values[key] = float(batch_normalized_entropy(stack).mean())
        report.count = len(stack)
    return report


def model_patterns(model, dataset, emb=None) -> dict:
    """{(layer, head): (N, T, T)} attention patterns of either model kind."""
    from paritycot import gpt, simplified

    dataset = np.asarray(dataset)
    if isinstance(model, simplified.SimplifiedParams):
        if emb is None:
            raise ValueError("the simplified model needs its embedding table")
        return {(0, 0): simplified.forward_batch(model, emb, dataset).P}
    if isinstance(model, gpt.GPTParams):
        fwd = gpt.gpt_forward(model, dataset)
        return {(l, h): fwd.patterns[l][:, h] for l in range(len(fwd.patterns))
                for h in range(fwd.patterns[l].shape[1])}
    raise TypeError(f"unsupported model type {type(model).__name__}")


def average_entropy(model, dataset, emb=None) -> EntropyReport:
    """Per-head mean of the normalized entropy over the sequences in ``dataset``."""
    if len(dataset) == 0:
        raise ValueError("average entropy needs a nonempty dataset")
    return entropy_report_from_patterns(model_patterns(model, dataset, emb))


class UnsupportedModel(ValueError):
    pass


@dataclass
class PhaseDiagnostics:
    positions: list  # CoT positions n+1..n+k
    kappa: np.ndarray  # (k, 2, d)
    delta: np.ndarray  # (k, 2, n+k, 2): delta[i, b, j, b1] for keys j = 1..n+k

    def strongest_keys(self) -> np.ndarray:
        """argmax_j max_b1 |delta| per (CoT position, bit), 1-based, keys j <= i."""
        out = np.zeros(self.delta.shape[:2], dtype=np.int64)
        for a, i in enumerate(self.positions):
            mag = np.abs(self.delta[a, :, :i, :]).max(axis=-1)
            out[a] = mag.argmax(axis=-1) + 1
        return out


def phase_diagnostics(params, emb, task: ParityTask) -> PhaseDiagnostics:
    """kappa[i][b] = -sum_r 1(nu[r,i,b] > 0) h_r W[r, d:], delta = <kappa, e(j, b1)>."""
    if params.nu is None:
        raise UnsupportedModel("phase diagnostics need the retained initialization coefficients nu")
    d = params.d
    active = (params.nu > 0).astype(np.float64)  # (2m, k, 2)
    weighted = active * params.h[:, None, None]
    kappa = -np.einsum("rkb,rd->kbd", weighted, params.W[:, d:])
    keys = emb.table[: task.n + task.k]  # (n+k, 2, d)
    delta = np.einsum("kbd,jcd->kbjc", kappa, keys)
    positions = list(range(task.n + 1, task.n + task.k + 1))
    return PhaseDiagnostics(positions, kappa, delta)


def secret_sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".rows.json")


def export_attention(record: AttentionRecord, path, task: ParityTask | None = None) -> None:
    """Matrix CSV of the pattern plus a JSON sidecar naming the secret rows."""
    save_matrix_csv(record.pattern, path)
    side = {"layer": record.layer, "head": record.head, "input_id": record.input_id,
            "T": int(record.pattern.shape[0]),
            "secret_rows": list(task.secret) if task is not None else [],
            "cot_sources": list(task.order) if task is not None else []}
    try:
        secret_sidecar_path(path).write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write attention sidecar for {path}: {exc}") from exc


def import_attention(path) -> tuple[AttentionRecord, dict]:
    pattern = load_matrix_csv(path)
    try:
        side = json.loads(secret_sidecar_path(path).read_text())
    except OSError as exc:
        raise OSError(f"cannot read attention sidecar for {path}: {exc}") from exc
    return AttentionRecord(side["layer"], side["head"], side["input_id"], pattern), side


def uniform_causal_pattern(T: int) -> np.ndarray:
    cols = np.arange(1, T + 1)
    return np.triu(np.ones((T, T))) / cols[None, :]


def log_ratio(a: int, b: int) -> float:
    return math.log(a) / math.log(b)
