import math

import numpy as np
import pytest

from vitcompress.atme import MergePlan
from vitcompress.cdcp import (
    ScoreBoard,
    assemble_grad,
    build_prune_report,
    compactor_grad,
    insert_compactors,
    prune_model,
    reset_masks,
    select_channels,
)
from vitcompress.checkpoint import to_bytes
from vitcompress.data import synth_generate
from vitcompress.numerics import Tensor
from vitcompress.trainer import (
    AdamW,
    Schedule,
    TrainingError,
    evaluate,
    finetune_cait,
    pretrain,
    with_ratio,
)
from vitcompress.vit import ViTModel, preset


# ---------------------------------------------------------------- schedule

def test_imagenet_ramp_steps_every_interval_after_warmup():
    s = Schedule.imagenet(final_ratio=0.3)
    ipe = 100
    start = s.warmup_iters(ipe)
    assert start == 30 * ipe
    assert s.r_target_at(start - 1, ipe) == 0.0
    assert s.r_target_at(start, ipe) == pytest.approx(0.00025)
    assert s.r_target_at(start + 24, ipe) == pytest.approx(0.00025)
    assert s.r_target_at(start + 25, ipe) == pytest.approx(0.0005)
    assert s.r_target_at(10 ** 7, ipe) == 0.3


def test_desk_ramp_finishes_at_requested_fraction():
    s = Schedule.desk(epochs=10, final_ratio=0.2, ramp_end_fraction=0.5)
    ipe = 40
    end = int(0.5 * 10 * ipe)
    assert s.r_target_at(end - 1, ipe) == pytest.approx(0.2, abs=s.step_size(ipe))
    assert s.r_target_at(end + s.interval_iters, ipe) == 0.2
    targets = [s.r_target_at(i, ipe) for i in range(10 * ipe)]
    assert all(a <= b for a, b in zip(targets, targets[1:]))


def test_relative_ratio_step():
    s = Schedule(final_ratio=0.4, ratio_step=0.1, ratio_step_mode="relative")
    assert s.step_size(10) == pytest.approx(0.04)
    with pytest.raises(ValueError):
        Schedule(ratio_step_mode="bogus")


def test_lr_warmup_then_cosine():
    s = Schedule(base_lr=1.0, min_lr=0.0, lr_warmup_epochs=1)
    ipe, total = 10, 100
    assert s.lr_at(0, total, ipe) == pytest.approx(0.1)
    assert s.lr_at(9, total, ipe) == pytest.approx(1.0)
    assert s.lr_at(10, total, ipe) == pytest.approx(1.0)
    assert s.lr_at(55, total, ipe) == pytest.approx(0.5)
    assert s.lr_at(100, total, ipe) == pytest.approx(0.0, abs=1e-12)


# ---------------------------------------------------------------- optimizer

def test_adamw_first_step_is_sign_scaled():
    p = Tensor(np.array([1.0, -2.0, 3.0], dtype=np.float32), requires_grad=True)
    opt = AdamW([(p, 0.9, 0.0, 1.0)])
    opt.step({p: np.array([0.5, -0.1, 0.0], dtype=np.float32)}, lr=0.01)
    np.testing.assert_allclose(p.data, [0.99, -1.99, 3.0], atol=1e-6)


def test_adamw_decay_is_decoupled_and_scaled():
    p = Tensor(np.array([2.0], dtype=np.float32), requires_grad=True)
    AdamW([(p, 0.9, 0.1, 3.0)]).step({p: np.zeros(1, dtype=np.float32)}, lr=0.5)
    assert p.data[0] == pytest.approx(2.0 * (1 - 1.5 * 0.1))


def test_adamw_reset_clears_selected_moments():
    p = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    opt = AdamW([(p, 0.9, 0.0, 1.0)])
    opt.step({p: np.ones((2, 2), dtype=np.float32)}, lr=0.1)
    opt.reset(p, np.array([[True, False], [False, False]]))
    assert opt.m[0][0, 0] == 0 and opt.v[0][0, 0] == 0 and opt.m[0][1, 1] != 0


# ---------------------------------------------------------------- masked-gradient dynamics

def test_masked_columns_follow_closed_form_shrinkage(rng):
    m = ViTModel.init(preset("desk"), 0)
    insert_compactors(m)
    comp = m.compactors[(0, "fc1")]
    comp.mask[:] = 0
    lr, lam = 0.1, 0.01
    n0 = comp.column_norms()
    for k in range(1, 31):
        g = assemble_grad(comp, rng.normal(size=comp.matrix.shape).astype(np.float32), lam)
        comp.matrix.data -= lr * g
        np.testing.assert_allclose(comp.column_norms(), n0 - k * lr * lam, atol=1e-4)


def test_selection_rebuild_lets_channels_recover(rng):
    m = ViTModel.init(preset("desk"), 0)
    insert_compactors(m)
    for c in m.compactors.values():
        c.matrix.data += rng.normal(0, 0.1, c.matrix.shape).astype(np.float32)
    first = select_channels(ScoreBoard.from_model(m), m, MergePlan(), 0.05)
    reset_masks(m, first.pruned)
    victim = min(first.pruned)
    comp = m.compactors[(victim.block, victim.kind)]
    at = victim.col if victim.head is None else (victim.head, victim.col)
    col = (slice(None), victim.col) if victim.head is None else (victim.head, slice(None), victim.col)
    comp.matrix.data[col] *= 100
    second = select_channels(ScoreBoard.from_model(m), m, MergePlan(), 0.05)
    reset_masks(m, second.pruned)
    assert victim not in second.pruned
    assert comp.mask[at] == 1


def test_pretrain_rejects_mismatched_data():
    m = ViTModel.init(preset("desk"), 0)
    with pytest.raises(TrainingError):
        pretrain(m, synth_generate(0, 20, img=16), Schedule.desk(epochs=1))


def test_non_finite_loss_is_reported():
    m = ViTModel.init(preset("desk"), 0)
    m.head_w.data[...] = np.nan
    with pytest.raises(TrainingError, match="non-finite"):
        pretrain(m, synth_generate(0, 40), Schedule.desk(epochs=1))


# ---------------------------------------------------------------- short training runs

def short_finetune(baseline, data, seed=0, **kw):
    sched = Schedule.desk(epochs=2, interval_iters=2, warmup_epochs=0, **kw)
    return finetune_cait(baseline, MergePlan.parse("1h,2v"), data, sched, seed=seed)


@pytest.fixture(scope="module")
def small_data():
    return synth_generate(3, 200)


def test_finetune_is_deterministic(small_data):
    base = ViTModel.init(preset("desk"), 1)
    a = short_finetune(base, small_data, final_ratio=0.1)
    b = short_finetune(base, small_data, final_ratio=0.1)
    assert to_bytes(a.model) == to_bytes(b.model)
    assert a.state.pruned == b.state.pruned


def test_finetune_leaves_input_model_untouched(small_data):
    base = ViTModel.init(preset("desk"), 1)
    before = to_bytes(base)
    short_finetune(base, small_data, final_ratio=0.1)
    assert to_bytes(base) == before


def test_applied_gradient_is_task_times_mask_plus_lasso(small_data):
    base = ViTModel.init(preset("desk"), 1)
    sched = Schedule.desk(epochs=1, interval_iters=2, warmup_epochs=0, final_ratio=0.1, lam=1e-3)
    seen = {"masked": 0, "steps": 0}

    def probe(it, model, g_task, g_applied):
        seen["steps"] += 1
        for key, comp in model.compactors.items():
            mat, mask = comp.matrix.data, comp.mask
            for idx in np.ndindex(mask.shape):
                col = (*idx[:-1], slice(None), idx[-1])
                want = compactor_grad(mat[col], mask[idx], g_task[key][col], sched.lam)
                np.testing.assert_allclose(g_applied[key][col], want, rtol=1e-5, atol=1e-9)
                if mask[idx] == 0:
                    seen["masked"] += 1
                    # nothing of the task gradient survives in a masked column
                    lasso = sched.lam * mat[col] / np.linalg.norm(mat[col].astype(np.float64))
                    np.testing.assert_allclose(g_applied[key][col], lasso, rtol=1e-5, atol=1e-12)

    finetune_cait(base, MergePlan(), small_data, sched, probe=probe)
    assert seen["steps"] > 0 and seen["masked"] > 0


def test_pretrain_reaches_90_percent(desk_baseline):
    _, acc, report = desk_baseline
    assert acc >= 0.90
    assert report.column("loss")[-1] < report.column("loss")[0]


def test_zero_final_ratio_keeps_accuracy(desk_baseline, desk_data):
    base, acc, _ = desk_baseline
    sched = with_ratio(Schedule.desk(epochs=2), 0.0)
    res = finetune_cait(base, MergePlan(), desk_data, sched)
    assert not res.state.pruned and res.report.column("masked_count")[-1] == 0
    assert evaluate(res.model, desk_data.split("test"))[0] >= acc - 0.03


@pytest.mark.slow
def test_desk_run_at_quarter_ratio_shrinks_pruned_channels(desk_baseline, desk_data):
    base, acc, _ = desk_baseline
    res = finetune_cait(base, MergePlan.parse("1h,2v"), desk_data, Schedule.desk(epochs=14, final_ratio=0.25))
    report = build_prune_report(res.model, res.state)
    assert res.state.r_current >= 0.25
    assert report.extra["max_pruned_norm"] <= 1e-2
    assert report.ok
    folded = prune_model(res.model, res.state).model
    assert evaluate(folded, desk_data.split("test"))[0] >= acc - 0.03
