"""Training loops and measurement protocols.

* ``compute_theory_schedule`` / ``run_three_step_theory``: the three-step
  full-batch SGD schedule for the simplified model (strict) and its
  desk-scale variant with more, smaller steps (relaxed).
* ``run_online_sgd``: fresh batch every step, halting on perfect
  autoregressive validation accuracy.
* ``run_multipass``: epochs over a fixed dataset with per-epoch shuffles.
* ``measure_sample_complexity`` and ``sweep``: the samples-to-perfect
  protocol over grids of (k, CoT, learning rate, seed).

Random streams: every run derives its streams from one root seed, with
fixed stream ids for the task, the model initialization, the training data
and the validation data, so validation sequences are never drawn from the
training stream.
"""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from paritycot import gpt, metrics, simplified
from paritycot.numerics import RngStream, derive_seed, format_float
from paritycot.parity_data import ParityTask, complete_inputs, gen_batch, sample_secret_set

STREAM_TASK = 0
STREAM_INIT = 1
STREAM_TRAIN = 2
STREAM_VAL = 3
STREAM_EPOCH = 4

HALT_PERFECT = "perfect"
HALT_BUDGET = "budget-exceeded"
HALT_DIVERGED = "diverged"

MICRO_BATCH = 512


def pin_blas_threads(n: int = 1):
    """Limit BLAS to ``n`` threads; results are bit-identical only at a fixed count."""
    return threadpool_limits(limits=n, user_api="blas")


# ---------------------------------------------------------------------------
# theory schedule


@dataclass(frozen=True)
class TheorySchedule:
    n: int
    k: int
    m: int
    delta: float
    eps: float
    batch: int
    lr0: float
    lr1: float
    lr2: float
    scale: float
    batch_formula: float = math.nan

    def __post_init__(self):
        if self.lr0 != self.lr1:
            raise ValueError("the schedule requires lr0 == lr1")
        for name in ("delta", "eps", "batch", "lr0", "lr2", "scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


def theory_batch_formula(n: int, delta: float, eps: float) -> float:
    """B = C2 * n * log^20(n / delta) with C2 = 1.28e7 / eps^2."""
    c2 = 1.28e7 / eps**2
    return c2 * n * math.log(n / delta) ** 20


def default_scale(delta: float = 0.1, eps: float = 0.1) -> float:
    """Scale that makes the formula batch equal 4096 at n = 30."""
    return 4096.0 / theory_batch_formula(30, delta, eps)


def compute_theory_schedule(n: int, k: int, m: int, delta: float = 0.1, eps: float = 0.1,
                            scale: float | None = None) -> TheorySchedule:
    if min(n, k, m) < 1 or delta <= 0 or eps <= 0:
        raise ValueError("n, k, m, delta, eps must be positive")
    if n <= delta:
        raise ValueError("need n > delta so that log(n / delta) > 0")
    scale = default_scale(delta, eps) if scale is None else float(scale)
    if not 0 < scale <= 1:
        raise ValueError(f"scale must lie in (0, 1], got {scale}")
    formula = theory_batch_formula(n, delta, eps)
    batch = max(64, int(round(formula * scale)))
    lr0 = m * eps * math.sqrt(batch) / (100.0 * math.log(n / delta))
    lr2 = 4.0 * k * eps / 3.0
    return TheorySchedule(n=n, k=k, m=m, delta=delta, eps=eps, batch=batch, lr0=lr0, lr1=lr0,
                          lr2=lr2, scale=scale, batch_formula=formula)


@dataclass(frozen=True)
class RelaxedPlan:
    """Desk-scale replacement for three huge full-batch steps.

    Each "update" averages ``*_accum`` micro-batches of ``micro_batch``
    sequences.  Phase 1 takes the lr0 step; phase 2 spreads lr1 over
    ``phase2_updates`` attention-only updates; phase 3 runs up to
    ``phase3_max_updates`` updates at lr2, halting once validation accuracy
    is perfect.
    """

    eps: float = 3.0
    lr0: float = 6000.0
    phase1_updates: int = 1
    phase1_accum: int = 100
    phase2_updates: int = 10
    phase2_accum: int = 10
    phase3_max_updates: int = 100
    phase3_accum: int = 5
    micro_batch: int = MICRO_BATCH

    def schedule(self, n: int, k: int, m: int, delta: float = 0.1) -> TheorySchedule:
        return TheorySchedule(n=n, k=k, m=m, delta=delta, eps=self.eps, batch=self.micro_batch,
                              lr0=self.lr0, lr1=self.lr0, lr2=4.0 * k * self.eps / 3.0, scale=1.0)

    @property
    def max_micro_batches(self) -> int:
        return (self.phase1_updates * self.phase1_accum + self.phase2_updates * self.phase2_accum
                + self.phase3_max_updates * self.phase3_accum)


# ---------------------------------------------------------------------------
# records


METRIC_FIELDS = ("step", "samples_seen", "loss", "tf_acc", "ar_acc", "min_entropy")


@dataclass
class EvalRow:
    step: int
    samples_seen: int
    loss: float
    tf_acc: float
    ar_acc: float
    min_entropy: float
    entropies: dict = field(default_factory=dict)  # (layer, head) -> value


@dataclass
class RunRecord:
    rows: list = field(default_factory=list)
    halt_reason: str = HALT_BUDGET
    samples_at_perfect: int | None = None
    snapshots: dict = field(default_factory=dict)  # (step, layer, head) -> (T, T) pattern
    steps: int = 0
    samples_seen: int = 0
    label: str = ""

    def metrics_csv(self) -> str:
        heads = sorted({key for row in self.rows for key in row.entropies})
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(list(METRIC_FIELDS) + [f"ent_L{l}H{h}" for l, h in heads])
        for row in self.rows:
            writer.writerow([row.step, row.samples_seen, format_float(row.loss), format_float(row.tf_acc),
                             format_float(row.ar_acc), format_float(row.min_entropy)]
                            + [format_float(row.entropies.get(key, math.nan)) for key in heads])
        return buf.getvalue()

    def write_metrics(self, path) -> None:
        Path(path).write_text(self.metrics_csv())


# ---------------------------------------------------------------------------
# model adapters: one interface over both model kinds


class SimplifiedModel:
    kind = "simplified"

    def __init__(self, params: simplified.SimplifiedParams, emb: simplified.EmbeddingTable,
                 task: ParityTask, cot: bool):
        self.params, self.emb, self.task, self.cot = params, emb, task, cot

    @property
    def tensors(self) -> dict:
        return {"A": self.params.A, "W": self.params.W}

    def loss_and_grads(self, batch, scored=None):
        loss, g, _ = simplified.batch_loss_and_grads(self.params, self.emb, self.task, batch, self.cot)
        return loss, {"A": g.dA, "W": g.dW}

    def complete(self, inputs):
        return simplified.autoregressive_batch(self.params, self.emb, self.task, inputs, self.cot)

    def scored_predictions(self, seqs):
        trace = simplified.forward_batch(self.params, self.emb, seqs)
        slots = simplified.scored_slots(self.task.n, seqs.shape[1], self.cot)
        return (trace.y[:, slots] > 0).astype(np.int8), slots

    def patterns(self, seqs) -> dict:
        return metrics.model_patterns(self.params, seqs, self.emb)

    def save(self, path, seed: int) -> None:
        simplified.save_checkpoint(path, self.params, self.emb, n=self.task.n, k=self.task.k, seed=seed)


class StandardModel:
    kind = "standard"

    def __init__(self, params: gpt.GPTParams, task: ParityTask, cot: bool, loss_positions: str = "scored"):
        self.params, self.task, self.cot = params, task, cot
        self.loss_positions = loss_positions

    @property
    def tensors(self) -> dict:
        return self.params.tensors

    def scored(self, T: int) -> list[int]:
        if self.loss_positions == "all":
            return list(range(1, T))
        return self.task.scored_positions(self.cot)

    def loss_and_grads(self, batch, scored=None):
        loss, grads, _ = gpt.gpt_loss_and_backward(self.params, batch, self.scored(batch.shape[1]))
        return loss, grads

    def complete(self, inputs):
        inputs = np.asarray(inputs, dtype=np.int8)
        count, n = inputs.shape
        steps = self.task.k if self.cot else 1
        seqs = np.zeros((count, n + 1 + steps), dtype=np.int8)
        seqs[:, :n] = inputs
        for s in range(steps):
            L = n + 1 + s
            fwd = gpt.gpt_forward(self.params, seqs[:, :L], query_rows=[L - 1])
            seqs[:, L] = fwd.logits[:, 0].argmax(axis=-1)
        return seqs

    def scored_predictions(self, seqs):
        slots = np.array(self.task.scored_positions(self.cot)) - 1
        fwd = gpt.gpt_forward(self.params, seqs, query_rows=slots)
        return fwd.logits.argmax(axis=-1).astype(np.int8), slots

    def patterns(self, seqs) -> dict:
        return metrics.model_patterns(self.params, seqs)

    def save(self, path, seed: int) -> None:
        gpt.save_checkpoint(path, self.params, seed=seed,
                            extra={"n": self.task.n, "k": self.task.k, "secret": list(self.task.secret),
                                   "order": list(self.task.order), "cot": self.cot})


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    accuracy: float
    tf_acc: float
    ar_acc: float
    entropy: metrics.EntropyReport | None


def evaluate(model, task: ParityTask, val_size: int = 2048, mode: str = "autoregressive",
             rng: RngStream | None = None, val_inputs=None, entropy_size: int = 0) -> EvalResult:
    """Teacher-forced or autoregressive accuracy on validation inputs.

    teacher-forced: fraction of scored positions predicted correctly given the
    ground-truth prefix.  autoregressive: fraction of inputs whose greedily
    generated final token equals the parity.  Both are always computed;
    ``accuracy`` is the one selected by ``mode``.  With ``entropy_size > 0``
    the per-head average normalized entropy over the first ``entropy_size``
    teacher-forced validation sequences is attached.
    """
    if mode not in ("teacher_forced", "autoregressive"):
        raise ValueError(f"unknown evaluation mode {mode!r}")
    if val_inputs is None:
        if val_size < 1:
            raise ValueError("val_size must be >= 1")
        if rng is None:
            raise ValueError("evaluation needs an rng or explicit validation inputs")
        val_inputs = rng.bits((val_size, task.n))
    val_inputs = np.asarray(val_inputs, dtype=np.int8)
    seqs = complete_inputs(task, val_inputs, model.cot)
    pred, slots = model.scored_predictions(seqs)
    tf_acc = float((pred == seqs[:, slots + 1]).mean())
    if model.cot:
        ar_acc = float((model.complete(val_inputs)[:, -1] == seqs[:, -1]).mean())
    else:
        ar_acc = float((pred[:, 0] == seqs[:, -1]).mean())  # one generated token: identical to tf
    entropy = None
    if entropy_size > 0:
        entropy = metrics.entropy_report_from_patterns(model.patterns(seqs[:entropy_size]))
    return EvalResult(tf_acc if mode == "teacher_forced" else ar_acc, tf_acc, ar_acc, entropy)


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    model: str = "standard"  # simplified | standard
    n: int = 16
    k: int = 3
    order: str = "sorted"  # sorted | random
    cot: bool = True
    batch: int = 512
    lr: float = 1e-3
    schedule: str = "linear"  # linear | constant
    optimizer: str = "adam"  # adam | sgd
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    budget: int = 500_000  # training samples (one-pass) / ignored for multi-pass
    passes: int = 1
    dataset_size: int = 0  # multi-pass only
    eval_every: int = 10  # steps (one-pass) or epochs (multi-pass)
    val_size: int = 2048
    entropy_size: int = 256
    halt: str = "perfect"  # perfect | never
    loss: str = "scored"  # scored | all (standard model only)
    seed: int = 0
    snapshot_steps: list = field(default_factory=list)
    # simplified model
    d: int = 256
    m: int = 32
    eps: float = 3.0
    # standard model
    n_layers: int = 1
    n_heads: int = 1
    d_model: int = 128
    d_ff: int = 512
    T_max: int = 128
    tied: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        choices = {"model": ("simplified", "standard"), "order": ("sorted", "random"),
                   "schedule": ("linear", "constant"), "optimizer": ("adam", "sgd"),
                   "halt": ("perfect", "never"), "loss": ("scored", "all")}
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ValueError(f"config key {key!r}: {getattr(self, key)!r} not in {allowed}")
        if not 1 <= self.k <= self.n:
            raise ValueError(f"config keys 'n'/'k': need 1 <= k <= n, got n={self.n}, k={self.k}")
        for key in ("batch", "passes", "eval_every", "val_size"):
            if getattr(self, key) < 1:
                raise ValueError(f"config key {key!r} must be >= 1")
        if self.budget < 0:
            raise ValueError("config key 'budget' must be >= 0")
        if self.passes == 1 and 0 < self.budget < self.batch:
            raise ValueError("config key 'budget' must be >= batch")
        if self.passes > 1 and self.dataset_size < 1:
            raise ValueError("config key 'dataset_size' must be >= 1 for multi-pass training")
        if self.lr <= 0:
            raise ValueError("config key 'lr' must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise KeyError(f"unknown config key(s): {', '.join(unknown)}")
        coerced = {key: _coerce(known[key].type, key, value) for key, value in data.items()}
        return cls(**coerced)

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "TrainConfig":
        data = self.to_dict()
        data.update(changes)
        return TrainConfig.from_dict(data)

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(self.dataset_size / self.batch)


def _coerce(type_name, key: str, value):
    type_name = str(type_name)
    try:
        if type_name == "bool":
            if isinstance(value, str):
                lowered = value.strip().lower()
                if lowered not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return lowered in ("true", "1", "yes")
            return bool(value)
        if type_name == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(float(value)) if isinstance(value, str) else int(value)
        if type_name == "float":
            return float(value)
        if type_name == "list":
            if isinstance(value, str):
                value = json.loads(value) if value.strip().startswith("[") else \
                    [int(v) for v in value.split(",") if v.strip()]
            return [int(v) for v in value]
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"config key {key!r}: cannot interpret {value!r} as {type_name}") from exc


# ---------------------------------------------------------------------------
# building runs


def build_task(config: TrainConfig, root: RngStream) -> ParityTask:
    return sample_secret_set(config.n, config.k, root.spawn(STREAM_TASK), config.order == "random")


def build_model(config: TrainConfig, task: ParityTask, root: RngStream):
    rng = root.spawn(STREAM_INIT)
    if config.model == "simplified":
        emb = simplified.init_embeddings(task.n + task.k + 1, config.d, rng)
        params = simplified.init_structured_params(task, emb, config.m, config.eps, rng)
        return SimplifiedModel(params, emb, task, config.cot)
    cfg = gpt.GPTConfig(n_layers=config.n_layers, n_heads=config.n_heads, d_model=config.d_model,
                        d_ff=config.d_ff, T_max=config.T_max, tied=config.tied)
    if task.seq_len(config.cot) > cfg.T_max:
        raise ValueError(f"sequence length {task.seq_len(config.cot)} exceeds T_max={cfg.T_max}")
    return StandardModel(gpt.gpt_init(cfg, rng), task, config.cot, config.loss)


class _Optimizer:
    def __init__(self, config: TrainConfig, model, total_steps: int):
        self.config = config
        self.model = model
        self.total = total_steps
        self.state = gpt.AdamState.zeros_like(model.tensors) if config.optimizer == "adam" else None

    def lr_at(self, step: int) -> float:
        if self.config.schedule == "linear":
            return gpt.linear_decay(self.config.lr, step, self.total)
        return self.config.lr

    def step(self, grads: dict, step: int) -> None:
        lr = self.lr_at(step)
        if self.state is not None:
            gpt.adam_step(self.model.tensors, grads, self.state, lr, self.config.beta1, self.config.beta2,
                          weight_decay=self.config.weight_decay)
        else:
            for name, tensor in self.model.tensors.items():
                tensor -= lr * grads[name]


def _eval_row(model, task, config, val_inputs, step, samples, loss) -> EvalRow:
    res = evaluate(model, task, val_inputs=val_inputs, entropy_size=config.entropy_size)
    ent = res.entropy.values if res.entropy is not None else {}
    min_ent = min(ent.values()) if ent else math.nan
    return EvalRow(step, samples, loss, res.tf_acc, res.ar_acc, min_ent, dict(ent))


def _snapshot(model, record: RunRecord, step: int, first_seq) -> None:
    for (layer, head), stack in model.patterns(first_seq[None, :]).items():
        record.snapshots[(step, layer, head)] = np.array(stack[0])


def run_on_batches(config: TrainConfig, model, task: ParityTask, batches, val_inputs,
                   eval_steps, total_steps: int) -> RunRecord:
    """Shared training core.

    ``batches`` yields ``(batch, samples_after)``; evaluation happens at step
    0 and after every step in ``eval_steps`` (a set or a predicate).  The loss
    column is the training loss of the most recent update (at step 0: the
    loss of the first batch before any update).
    """
    record = RunRecord()
    opt = _Optimizer(config, model, total_steps)
    is_eval = eval_steps if callable(eval_steps) else (lambda s, _set=frozenset(eval_steps): s in _set)
    snap = set(config.snapshot_steps)
    val_seqs = complete_inputs(task, val_inputs[:1], config.cot)
    step, samples, last_loss = 0, 0, math.nan
    pending = iter(batches)
    first = next(pending, None)
    if first is None:  # empty budget
        record.halt_reason = HALT_BUDGET
        return record
    batch, after = first
    loss, grads = model.loss_and_grads(batch)
    last_loss = loss
    row = _eval_row(model, task, config, val_inputs, 0, 0, loss)
    record.rows.append(row)
    if 0 in snap:
        _snapshot(model, record, 0, val_seqs[0])
    if config.halt == "perfect" and row.ar_acc == 1.0:
        record.halt_reason, record.samples_at_perfect = HALT_PERFECT, 0
        return record
    while True:
        if not math.isfinite(last_loss):
            record.halt_reason = HALT_DIVERGED
            break
        opt.step(grads, step)
        step += 1
        samples = after
        record.steps, record.samples_seen = step, samples
        if step in snap:
            _snapshot(model, record, step, val_seqs[0])
        nxt = next(pending, None)
        final = nxt is None
        if is_eval(step) or final:
            row = _eval_row(model, task, config, val_inputs, step, samples, last_loss)
            record.rows.append(row)
            if config.halt == "perfect" and row.ar_acc == 1.0:
                record.halt_reason, record.samples_at_perfect = HALT_PERFECT, samples
                break
        if final:
            record.halt_reason = HALT_BUDGET
            break
        batch, after = nxt
        loss, grads = model.loss_and_grads(batch)
        last_loss = loss
    if not math.isfinite(last_loss):
        record.halt_reason = HALT_DIVERGED
    return record


@dataclass
class RunResult:
    config: TrainConfig
    task: ParityTask
    model: object
    record: RunRecord


def _validation_inputs(config: TrainConfig, root: RngStream, exclude: np.ndarray | None = None):
    """Validation inputs from their own stream; with ``exclude`` (a finite
    training set) draws colliding with a training input are rejected."""
    rng = root.spawn(STREAM_VAL)
    if exclude is None:
        return rng.bits((config.val_size, config.n))
    if config.n <= 62 and 2**config.n - len({_key(r) for r in exclude}) < config.val_size:
        raise ValueError("not enough inputs left to draw a disjoint validation set")
    banned = {_key(r) for r in exclude}
    out = []
    while len(out) < config.val_size:
        for row in rng.bits((config.val_size, config.n)):
            if _key(row) not in banned:
                out.append(row)
                if len(out) == config.val_size:
                    break
    return np.array(out, dtype=np.int8)


def _key(row) -> bytes:
    return np.asarray(row, dtype=np.int8).tobytes()


def run_online_sgd(config: TrainConfig, rng: RngStream | None = None) -> RunResult:
    """One-pass training: every step draws a fresh batch of ``config.batch``."""
    if config.passes != 1:
        raise ValueError("run_online_sgd needs a one-pass config (passes = 1)")
    root = rng if rng is not None else RngStream(config.seed)
    task = build_task(config, root)
    model = build_model(config, task, root)
    val_inputs = _validation_inputs(config, root)
    train_rng = root.spawn(STREAM_TRAIN)
    total = config.budget // config.batch

    def batches():
        for s in range(total):
            yield gen_batch(task, config.cot, train_rng, config.batch), (s + 1) * config.batch

    record = run_on_batches(config, model, task, batches(), val_inputs,
                            lambda s: s % config.eval_every == 0, total)
    return RunResult(config, task, model, record)


def make_dataset(config: TrainConfig, root: RngStream, task: ParityTask) -> np.ndarray:
    """Fixed training set for multi-pass runs, drawn from the training stream."""
    return gen_batch(task, config.cot, root.spawn(STREAM_TRAIN), config.dataset_size)


def run_multipass(config: TrainConfig, dataset: np.ndarray | None = None,
                  rng: RngStream | None = None) -> RunResult:
    """``config.passes`` epochs over a fixed dataset, evaluating every
    ``config.eval_every`` epochs (and after the last).  Each epoch shuffles
    with a seed derived from (run seed, epoch)."""
    root = rng if rng is not None else RngStream(config.seed)
    task = build_task(config, root)
    model = build_model(config, task, root)
    if dataset is None:
        dataset = make_dataset(config, root, task)
    dataset = np.asarray(dataset, dtype=np.int8)
    if len(dataset) < 1:
        raise ValueError("multi-pass training needs a nonempty dataset")
    val_inputs = _validation_inputs(config, root, exclude=dataset[:, : task.n])
    per_epoch = math.ceil(len(dataset) / config.batch)
    total = per_epoch * config.passes
    epoch_root = root.spawn(STREAM_EPOCH)

    def batches():
        seen = 0
        for epoch in range(config.passes):
            order = epoch_shuffle(epoch_root, epoch, len(dataset))
            for start in range(0, len(dataset), config.batch):
                chunk = dataset[order[start : start + config.batch]]
                seen += len(chunk)
                yield chunk, seen

    eval_steps = {per_epoch * e for e in range(config.eval_every, config.passes + 1, config.eval_every)}
    record = run_on_batches(config, model, task, batches(), val_inputs, eval_steps, total)
    return RunResult(config, task, model, record)


def epoch_shuffle(epoch_root: RngStream, epoch: int, size: int) -> np.ndarray:
    return RngStream(derive_seed(epoch_root.seed, epoch), 0).permutation(size)


def run_training(config: TrainConfig) -> RunResult:
    with pin_blas_threads(1):
        if config.passes == 1:
            return run_online_sgd(config)
        return run_multipass(config)


def measure_sample_complexity(config: TrainConfig, rng: RngStream | None = None) -> tuple[int | None, str]:
    """(samples at the first perfect evaluation, halt reason); the count is
    None unless the run halted on perfect accuracy."""
    result = run_online_sgd(config, rng)
    return result.record.samples_at_perfect, result.record.halt_reason


# ---------------------------------------------------------------------------
# sweeps


SWEEP_FIELDS = ("n", "k", "cot", "lr", "seed", "samples_at_perfect", "halt_reason")


@dataclass(frozen=True)
class SweepCell:
    k: int
    cot: bool
    lr_index: int
    seed_index: int
    lr: float
    seed: int


@dataclass
class SweepResult:
    rows: list  # dicts keyed by SWEEP_FIELDS, in cell order
    n: int

    def table(self) -> dict:
        """(k, cot) -> min over lr of the median over seeds (inf when censored)."""
        groups: dict = {}
        for row in self.rows:
            value = math.inf if row["samples_at_perfect"] is None else float(row["samples_at_perfect"])
            groups.setdefault((row["k"], row["cot"]), {}).setdefault(row["lr"], []).append(value)
        return {key: min(statistics.median(v) for v in by_lr.values()) for key, by_lr in groups.items()}

    def csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(SWEEP_FIELDS)
        for row in self.rows:
            writer.writerow([row["n"], row["k"], int(row["cot"]), format_float(row["lr"]), row["seed"],
                             "" if row["samples_at_perfect"] is None else row["samples_at_perfect"],
                             row["halt_reason"]])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.csv_text())


def sweep_cells(base: TrainConfig, k_values, lr_grid, seeds: int, cot_values=(True, False)) -> list:
    if not k_values or not lr_grid or seeds < 1 or not cot_values:
        raise ValueError("sweep grids must be nonempty")
    cells = []
    for k in k_values:
        for cot in cot_values:
            for li, lr in enumerate(lr_grid):
                for si in range(seeds):
                    cells.append(SweepCell(int(k), bool(cot), li, si, float(lr),
                                           derive_seed(base.seed, int(k), li, si) % 2**63))
    return cells


def run_cell(base: TrainConfig, cell: SweepCell) -> dict:
    config = base.replace(k=cell.k, cot=cell.cot, lr=cell.lr, seed=cell.seed, snapshot_steps=[])
    with pin_blas_threads(1):
        try:
            samples, reason = measure_sample_complexity(config)
        except FloatingPointError:
            samples, reason = None, HALT_DIVERGED
    if reason == HALT_DIVERGED:
        reason = HALT_BUDGET  # a diverged cell never reached perfect accuracy
    return {"n": base.n, "k": cell.k, "cot": cell.cot, "lr": cell.lr, "seed": cell.seed,
            "samples_at_perfect": samples, "halt_reason": reason}


def _run_cell_star(args):
    return run_cell(*args)


def sweep(base: TrainConfig, k_values, lr_grid, seeds: int, cot_values=(True, False),
          workers: int = 1, progress=None) -> SweepResult:
    """Sample complexity for every (k, cot, lr, seed) cell.

    Each cell's seed is derived from (base seed, k, lr index, seed index), so
    cells are independent of each other and of execution order; results are
    merged in cell order whatever the worker count.  CoT and no-CoT cells
    with the same indices share a seed (same secret set and initialization).
    """
    cells = sweep_cells(base, k_values, lr_grid, seeds, cot_values)
    jobs = [(base, cell) for cell in cells]
    rows = []
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for row in pool.map(_run_cell_star, jobs):
                rows.append(row)
                if progress:
                    progress(row)
    else:
        for job in jobs:
            rows.append(_run_cell_star(job))
            if progress:
                progress(rows[-1])
    return SweepResult(rows, base.n)


# ---------------------------------------------------------------------------
# three-step theory schedule


@dataclass
class ThreeStepResult:
    mode: str  # strict | relaxed
    params: simplified.SimplifiedParams
    emb: simplified.EmbeddingTable
    task: ParityTask
    schedule: TheorySchedule
    record: RunRecord
    first_attention_grad_zero: bool
    diagnostics: metrics.PhaseDiagnostics | None
    attention_after_phase2: dict  # CoT position -> mean softmax column over the validation batch
    attention_argmax_ok: bool
    accuracy: float
    micro_batches: int

    def summary(self) -> dict:
        strongest = self.diagnostics.strongest_keys().tolist() if self.diagnostics is not None else None
        return {"mode": self.mode, "n": self.task.n, "k": self.task.k, "secret": list(self.task.secret),
                "order": list(self.task.order), "schedule": asdict(self.schedule),
                "first_attention_grad_zero": self.first_attention_grad_zero,
                "strongest_keys_after_phase1": strongest,
                "attention_argmax_on_source_after_phase2": self.attention_argmax_ok,
                "accuracy": self.accuracy, "micro_batches": self.micro_batches,
                "halt_reason": self.record.halt_reason}


def _accumulated_grads(params, emb, task, rng: RngStream, total: int, micro: int):
    """Exact batch-mean gradient over ``total`` fresh CoT sequences, in chunks."""
    gA = np.zeros_like(params.A)
    gW = np.zeros_like(params.W)
    loss = 0.0
    done = 0
    while done < total:
        size = min(micro, total - done)
        batch = gen_batch(task, True, rng, size)
        l, g, _ = simplified.batch_loss_and_grads(params, emb, task, batch, True)
        gA += g.dA * size
        gW += g.dW * size
        loss += l * size
        done += size
    return loss / total, gA / total, gW / total


def _attention_on_sources(params, emb, task, val_seqs):
    trace = simplified.forward_batch(params, emb, val_seqs)
    columns, ok = {}, True
    for i in range(task.n + 1, task.n + task.k + 1):
        col = trace.P[:, :i, i - 1].mean(axis=0)
        columns[i] = col
        ok &= int(col.argmax()) + 1 == task.cot_source(i)
    return columns, bool(ok)


def _ar_accuracy(params, emb, task, val_inputs, val_seqs) -> float:
    seqs = simplified.autoregressive_batch(params, emb, task, val_inputs, True)
    return float((seqs[:, -1] == val_seqs[:, -1]).mean())


def run_three_step_theory(task: ParityTask, emb: simplified.EmbeddingTable, m: int,
                          schedule: TheorySchedule, rng: RngStream, mode: str = "strict",
                          plan: RelaxedPlan | None = None, val_size: int = 2048) -> ThreeStepResult:
    """Structured initialization followed by the three-phase SGD schedule.

    strict: exactly three full-batch steps of ``schedule.batch`` fresh CoT
    sequences with learning rates (lr0, lr1, lr2).  relaxed: the phases of
    ``plan`` (attention-only phase 2, early halt in phase 3).  ``rng`` seeds
    the initialization (stream 1), training data (2) and validation (3).
    """
    if mode not in ("strict", "relaxed"):
        raise ValueError(f"unknown three-step mode {mode!r}")
    if mode == "relaxed" and plan is None:
        plan = RelaxedPlan(eps=schedule.eps, lr0=schedule.lr0, micro_batch=schedule.batch)
    params = simplified.init_structured_params(task, emb, m, schedule.eps, rng.spawn(STREAM_INIT))
    h_before = params.h.copy()
    train_rng = rng.spawn(STREAM_TRAIN)
    val_inputs = rng.spawn(STREAM_VAL).bits((val_size, task.n))
    val_seqs = complete_inputs(task, val_inputs, True)
    record = RunRecord(label=mode)
    micro = 0
    samples = 0
    zero_grad = False
    diagnostics = None
    columns, argmax_ok = {}, False
    model = SimplifiedModel(params, emb, task, True)
    config = TrainConfig(model="simplified", n=task.n, k=task.k, cot=True, d=emb.d, m=m,
                         eps=schedule.eps, entropy_size=256)

    def log(step, loss):
        record.rows.append(_eval_row(model, task, config, val_inputs, step, samples, loss))

    def update(lr, total, micro_size, attention=True, ffn=True):
        nonlocal micro, samples
        loss, gA, gW = _accumulated_grads(params, emb, task, train_rng, total, micro_size)
        micro += math.ceil(total / micro_size)
        samples += total
        if attention:
            params.A -= lr * gA
        if ffn:
            params.W -= lr * gW
        return loss, gA

    if mode == "strict":
        micro_size = MICRO_BATCH
        steps = [(schedule.lr0, True), (schedule.lr1, True), (schedule.lr2, True)]
        for s, (lr, _) in enumerate(steps):
            loss, gA = update(lr, schedule.batch, micro_size)
            if s == 0:
                zero_grad = bool(np.all(gA == 0.0))
                diagnostics = metrics.phase_diagnostics(params, emb, task)
            if s == 1:
                columns, argmax_ok = _attention_on_sources(params, emb, task, val_seqs)
            log(s + 1, loss)
        record.steps = 3
        accuracy = record.rows[-1].ar_acc
        record.halt_reason = HALT_PERFECT if accuracy == 1.0 else HALT_BUDGET
    else:
        mb = plan.micro_batch
        loss = math.nan
        for u in range(plan.phase1_updates):
            loss, gA = update(schedule.lr0 / plan.phase1_updates, plan.phase1_accum * mb, mb)
            if u == 0:
                zero_grad = bool(np.all(gA == 0.0))
        diagnostics = metrics.phase_diagnostics(params, emb, task)
        log(micro, loss)
        for _ in range(plan.phase2_updates):
            loss, _ = update(schedule.lr1 / plan.phase2_updates, plan.phase2_accum * mb, mb, ffn=False)
        columns, argmax_ok = _attention_on_sources(params, emb, task, val_seqs)
        log(micro, loss)
        accuracy = _ar_accuracy(params, emb, task, val_inputs, val_seqs)
        record.halt_reason = HALT_BUDGET
        for _ in range(plan.phase3_max_updates):
            if accuracy == 1.0:
                break
            loss, _ = update(schedule.lr2, plan.phase3_accum * mb, mb)
            accuracy = _ar_accuracy(params, emb, task, val_inputs, val_seqs)
        log(micro, loss)
        record.steps = micro
        if accuracy == 1.0:
            record.halt_reason = HALT_PERFECT
            record.samples_at_perfect = samples
    record.samples_seen = samples
    if not np.array_equal(params.h, h_before):
        raise AssertionError("the output layer h must stay frozen")
    return ThreeStepResult(mode, params, emb, task, schedule, record, zero_grad, diagnostics, columns,
                           argmax_ok, accuracy, micro)


# ---------------------------------------------------------------------------
# run directories


def write_run_dir(run_dir, result: RunResult, frozen_config: dict) -> Path:
    """config.json, metrics.csv, checkpoint.final and attn/ snapshots."""
    run_dir = Path(run_dir)
    (run_dir / "attn").mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(frozen_config, indent=2, sort_keys=True) + "\n")
    result.record.write_metrics(run_dir / "metrics.csv")
    result.model.save(run_dir / "checkpoint.final", result.config.seed)
    for (step, layer, head), pattern in sorted(result.record.snapshots.items()):
        rec = metrics.AttentionRecord(layer, head, 0, pattern)
        metrics.export_attention(rec, run_dir / "attn" / f"step_{step}_L{layer}H{head}.csv", result.task)
    summary = {"halt_reason": result.record.halt_reason, "samples_at_perfect": result.record.samples_at_perfect,
               "steps": result.record.steps, "samples_seen": result.record.samples_seen,
               "secret": list(result.task.secret), "order": list(result.task.order)}
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return run_dir
