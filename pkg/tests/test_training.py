import math

import numpy as np
import pytest

from paritycot import construct, training
from paritycot import simplified as sm
from paritycot.numerics import RngStream
from paritycot.parity_data import sample_secret_set
from paritycot.training import TrainConfig


def small_standard(**kw):
    base = dict(model="standard", n=8, k=2, cot=True, d_model=16, d_ff=32, batch=64, lr=1e-3,
                budget=64 * 12, eval_every=4, val_size=128, entropy_size=4, T_max=16)
    base.update(kw)
    return TrainConfig.from_dict(base)


def smoke_simplified(**kw):
    base = dict(model="simplified", n=10, k=2, cot=True, d=64, m=16, optimizer="sgd", lr=10.0,
                schedule="constant", batch=128, budget=200 * 128, eval_every=5, val_size=512,
                entropy_size=8)
    base.update(kw)
    return TrainConfig.from_dict(base)


# --- theory schedule -------------------------------------------------------


def test_schedule_learning_rates_tie_and_formula():
    s = training.compute_theory_schedule(30, 5, 10, 0.1, 0.1, scale=1e-40)
    assert s.lr0 == s.lr1
    assert s.lr2 == pytest.approx(4 * 5 * 0.1 / 3)
    assert s.lr0 == pytest.approx(10 * 0.1 * math.sqrt(s.batch) / (100 * math.log(300)))


def test_schedule_batch_is_scaled_formula():
    formula = 1.28e7 / 0.01 * 30 * math.log(300) ** 20
    for scale in (1e-40, 1e-38, training.default_scale()):
        s = training.compute_theory_schedule(30, 5, 10, 0.1, 0.1, scale=scale)
        assert s.batch == max(64, round(formula * scale))
        assert s.batch_formula == pytest.approx(formula, rel=1e-12)
    assert training.compute_theory_schedule(30, 5, 10).batch == 4096
    assert training.compute_theory_schedule(30, 5, 10, scale=1e-60).batch == 64


def test_step_size_ratio_vanishes_with_n():
    def ratio(n):
        s = training.compute_theory_schedule(n, int(math.log2(n)), 16, scale=1.0)
        return s.lr2 / s.lr0

    assert ratio(10**4) < ratio(10**2)


def test_schedule_validation():
    with pytest.raises(ValueError):
        training.compute_theory_schedule(30, 5, 10, scale=2.0)
    with pytest.raises(ValueError):
        training.TheorySchedule(10, 2, 4, 0.1, 0.1, 64, 1.0, 2.0, 1.0, 1.0)


# --- configuration -----------------------------------------------------------


def test_config_rejects_unknown_and_bad_values():
    with pytest.raises(KeyError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError, match="budget"):
        TrainConfig(batch=64, budget=10)
    with pytest.raises(ValueError, match="optimizer"):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ValueError, match="lr"):
        TrainConfig.from_dict({"lr": "fast"})
    cfg = TrainConfig.from_dict({"cot": "false", "n": "12", "snapshot_steps": "0,5"})
    assert cfg.cot is False and cfg.n == 12 and cfg.snapshot_steps == [0, 5]


# --- evaluation --------------------------------------------------------------


def test_constructed_model_scores_perfectly():
    rng = RngStream(0)
    task = sample_secret_set(10, 3, rng)
    emb = sm.init_embeddings(12, 64, rng)
    params = construct.build_parity_weights(task, emb)
    model = training.SimplifiedModel(params, emb, task, cot=False)
    res = training.evaluate(model, task, 2048, rng=rng)
    assert res.accuracy == 1.0 and res.tf_acc == 1.0


def test_untrained_model_is_at_chance():
    cfg = TrainConfig(model="standard", n=12, k=3, cot=False, d_model=16, d_ff=32, T_max=16)
    root = RngStream(3)
    task = training.build_task(cfg, root)
    model = training.build_model(cfg, task, root)
    res = training.evaluate(model, task, 2048, rng=root.spawn(99))
    assert abs(res.accuracy - 0.5) <= 0.05
    with pytest.raises(ValueError):
        training.evaluate(model, task, 0, rng=root)


# --- one-pass training -------------------------------------------------------


def test_zero_budget_takes_no_steps():
    result = training.run_online_sgd(small_standard(budget=0))
    assert result.record.steps == 0 and not result.record.rows
    assert result.record.halt_reason == training.HALT_BUDGET


def test_one_pass_record_invariants():
    cfg = small_standard(halt="never")
    rec = training.run_online_sgd(cfg).record
    assert rec.steps == 12 and rec.samples_seen == 12 * 64
    assert [r.step for r in rec.rows] == [0, 4, 8, 12]
    seen = [r.samples_seen for r in rec.rows]
    assert seen == sorted(seen) and seen[-1] == rec.steps * cfg.batch
    assert all(0 <= r.tf_acc <= 1 and 0 <= r.ar_acc <= 1 for r in rec.rows)
    assert rec.metrics_csv().splitlines()[0] == "step,samples_seen,loss,tf_acc,ar_acc,min_entropy,ent_L0H0"


def test_online_run_is_deterministic():
    a = training.run_online_sgd(small_standard(halt="never"))
    b = training.run_online_sgd(small_standard(halt="never"))
    assert a.record.metrics_csv() == b.record.metrics_csv()
    assert all(np.array_equal(a.model.tensors[n], b.model.tensors[n]) for n in a.model.tensors)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_halts():
    cfg = small_standard(optimizer="sgd", lr=1e300, halt="never")
    rec = training.run_online_sgd(cfg).record
    assert rec.halt_reason == training.HALT_DIVERGED


def test_eval_every_never_delays_first_hit():
    cfg = smoke_simplified(seed=1)
    fine = training.measure_sample_complexity(cfg.replace(eval_every=1))
    coarse = training.measure_sample_complexity(cfg.replace(eval_every=5))
    assert fine[1] == coarse[1] == training.HALT_PERFECT
    assert fine[0] <= coarse[0]


def test_simplified_smoke_run_reaches_perfect_accuracy():
    rec = training.run_online_sgd(smoke_simplified()).record
    assert rec.halt_reason == training.HALT_PERFECT
    assert rec.rows[-1].ar_acc == 1.0 and rec.steps <= 200


def test_simplified_frozen_tensors_unchanged():
    result = training.run_online_sgd(smoke_simplified(budget=128 * 5, halt="never"))
    assert set(result.model.tensors) == {"A", "W"}
    assert np.all(np.abs(result.model.params.h) == 1 / (2 * 16))


# --- multi-pass ------------------------------------------------------------


def test_epoch_shuffles_differ_and_repeat():
    root = RngStream(0).spawn(training.STREAM_EPOCH)
    a0, a1 = training.epoch_shuffle(root, 0, 50), training.epoch_shuffle(root, 1, 50)
    assert not np.array_equal(a0, a1)
    assert np.array_equal(a0, training.epoch_shuffle(root, 0, 50))


def test_multipass_counts_and_disjoint_validation():
    cfg = small_standard(passes=3, dataset_size=100, eval_every=1, halt="never", val_size=64)
    result = training.run_multipass(cfg)
    rec = result.record
    assert rec.samples_seen == 300 and rec.steps == 6
    assert [r.samples_seen for r in rec.rows] == [0, 100, 200, 300]
    root = RngStream(cfg.seed)
    data = training.make_dataset(cfg, root, result.task)
    val = training._validation_inputs(cfg, root, exclude=data[:, : cfg.n])
    assert not {r.tobytes() for r in val} & {r.tobytes() for r in data[:, : cfg.n]}


def test_single_epoch_matches_online_stream():
    cfg = small_standard(halt="never", batch=64, budget=64 * 4, eval_every=2)
    root = RngStream(cfg.seed)
    task = training.build_task(cfg, root)
    online = training.run_online_sgd(cfg)
    # replay the exact online sample stream as a one-epoch dataset without shuffling
    stream_rng = root.spawn(training.STREAM_TRAIN)
    from paritycot.parity_data import gen_batch

    batches = [gen_batch(task, True, stream_rng, 64) for _ in range(4)]
    model = training.build_model(cfg, task, RngStream(cfg.seed))
    val = training._validation_inputs(cfg, RngStream(cfg.seed))
    rec = training.run_on_batches(cfg, model, task, ((b, 64 * (i + 1)) for i, b in enumerate(batches)),
                                  val, lambda s: s % 2 == 0, 4)
    assert rec.metrics_csv() == online.record.metrics_csv()


# --- sweeps -------------------------------------------------------------------


def test_single_cell_sweep_matches_direct_measurement():
    base = smoke_simplified(budget=128 * 40)
    res = training.sweep(base, [2], [10.0], 1, cot_values=(True,))
    assert len(res.rows) == 1
    cell = training.sweep_cells(base, [2], [10.0], 1, (True,))[0]
    direct = training.measure_sample_complexity(base.replace(seed=cell.seed))
    assert (res.rows[0]["samples_at_perfect"], res.rows[0]["halt_reason"]) == direct
    assert res.csv_text().splitlines()[0] == "n,k,cot,lr,seed,samples_at_perfect,halt_reason"


def test_sweep_cells_are_order_independent():
    base = smoke_simplified(budget=128 * 10, halt="never")
    cells = training.sweep_cells(base, [1, 2], [1.0, 10.0], 2, (True,))
    forward = [training.run_cell(base, c) for c in cells]
    backward = [training.run_cell(base, c) for c in reversed(cells)][::-1]
    assert forward == backward
    assert len({c.seed for c in cells}) == len(cells)


def test_sweep_table_censors_to_infinity():
    rows = [dict(n=8, k=1, cot=True, lr=lr, seed=s, samples_at_perfect=v,
                 halt_reason="perfect" if v else "budget-exceeded")
            for lr, s, v in [(1, 0, 100), (1, 1, None), (1, 2, 300), (2, 0, None), (2, 1, None), (2, 2, 50)]]
    table = training.SweepResult(rows, 8).table()
    assert table[(1, True)] == 300.0
    rows = [r for r in rows if r["lr"] == 2]
    assert training.SweepResult(rows, 8).table()[(1, True)] == math.inf


def test_parallel_sweep_matches_serial():
    base = smoke_simplified(budget=128 * 6, halt="never")
    a = training.sweep(base, [1, 2], [10.0], 1, (True,), workers=1)
    b = training.sweep(base, [1, 2], [10.0], 1, (True,), workers=2)
    assert a.csv_text() == b.csv_text()


# --- three-step schedule -----------------------------------------------------


def test_three_step_strict_keeps_h_and_zero_first_attention_gradient():
    rng = RngStream(0)
    task = sample_secret_set(8, 2, rng)
    emb = sm.init_embeddings(11, 32, rng)
    schedule = training.compute_theory_schedule(8, 2, 8, eps=0.5, scale=1e-30)
    res = training.run_three_step_theory(task, emb, 8, schedule, RngStream(1), mode="strict", val_size=256)
    assert res.first_attention_grad_zero
    assert res.record.steps == 3 and len(res.record.rows) == 3
    assert res.micro_batches == 3 * math.ceil(schedule.batch / training.MICRO_BATCH)
    assert res.diagnostics.delta.shape == (2, 2, 10, 2)
    assert np.all(np.abs(res.params.h) == 1 / 16)
    assert set(res.summary()) >= {"mode", "accuracy", "first_attention_grad_zero"}


@pytest.mark.parametrize("seed", [0, 2])
def test_simplified_n16_k4_learns_sparse_attention(seed):
    cfg = smoke_simplified(n=16, k=4, d=256, m=32, lr=30.0, batch=256, budget=300 * 256,
                           val_size=1024, entropy_size=64, seed=seed)
    rec = training.run_online_sgd(cfg).record
    assert rec.halt_reason == training.HALT_PERFECT
    assert rec.rows[0].min_entropy == pytest.approx(1.0)
    assert rec.rows[-1].min_entropy < 0.2
