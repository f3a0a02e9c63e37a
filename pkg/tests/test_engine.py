import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from disparse.arbiter import ArbiterKind
from disparse.engine import (
    DynamicSchedule,
    EngineError,
    SparsityTarget,
    calibrate_from_scores,
    compensated_prune_rate,
    dynamic_step,
    erk_allocation,
    erk_layer_counts,
    generate_masks,
    init_dynamic_state,
    keep_count,
    masks_from_scores,
    top_k_bits,
)
from disparse.harness.construct import copy_head
from disparse.harness.data import SuiteSpec, TaskDef
from disparse.harness.train import build_model, fit, sample_batches, stream, suite_for, train
from disparse.model import Mask, ParamPartition
from disparse.autograd import Tensor
from disparse.saliency import SaliencyVector, static_saliency

from helpers import small_config

OR = ArbiterKind("or")


# -- top-count ------------------------------------------------------------------


def test_top_k_example():
    np.testing.assert_array_equal(top_k_bits(np.array([0.1, 0.5, 0.3, 0.9]), 2), [0, 1, 0, 1])


def test_top_k_ties_go_to_lower_index():
    np.testing.assert_array_equal(top_k_bits(np.array([1.0, 2.0, 2.0, 2.0]), 2), [0, 1, 1, 0])


def test_top_k_brute_force():
    """Every score vector over {0, 1, 2} up to length 5 and every count."""
    for n in range(1, 6):
        for values in itertools.product((0.0, 1.0, 2.0), repeat=n):
            scores = np.array(values)
            for count in range(n + 1):
                bits = top_k_bits(scores, count)
                # Reference: rank by (-score, index) with a plain sort.
                ranked = sorted(range(n), key=lambda i: (-values[i], i))
                want = np.zeros(n, bool)
                want[ranked[:count]] = True
                np.testing.assert_array_equal(bits, want)


def test_top_k_rejects_bad_input():
    with pytest.raises(EngineError):
        top_k_bits(np.ones(3), 4)
    with pytest.raises(EngineError):
        top_k_bits(np.array([1.0, np.nan]), 1)


@pytest.mark.parametrize(
    "sparsity,n,want",
    [(0.9, 10, 1), (0.5, 7, 3), (0.3, 100, 70), (0.7, 3, 0), (1e-15, 15000, 15000)],
)
def test_keep_count(sparsity, n, want):
    assert keep_count(sparsity, n) == want


# -- ERK -----------------------------------------------------------------------------


def test_erk_single_layer_gets_requested_sparsity():
    assert erk_allocation([("a", (20, 30))], 0.8)["a"] == pytest.approx(0.8, abs=1e-12)


def test_erk_small_layer_denser_than_large():
    alloc = erk_allocation([("small", (10, 10)), ("large", (100, 100))], 0.9)
    assert alloc["small"] < alloc["large"]


def test_erk_caps_density_and_redistributes():
    alloc = erk_allocation([("tiny", (2, 2)), ("large", (100, 100))], 0.5)
    assert alloc["tiny"] == 0.0
    kept = 4 + (1 - alloc["large"]) * 10000
    assert kept == pytest.approx(0.5 * 10004, rel=1e-12)


@settings(max_examples=60)
@given(
    st.lists(st.tuples(st.integers(1, 40), st.integers(1, 40)), min_size=1, max_size=6),
    st.floats(0.01, 0.99),
)
def test_erk_counts_hit_the_global_budget(shapes, sparsity):
    layers = [(f"l{i}", s) for i, s in enumerate(shapes)]
    counts = erk_layer_counts(layers, sparsity)
    m = sum(a * b for a, b in shapes)
    assert sum(counts.values()) == round((1 - sparsity) * m)
    for lid, shape in layers:
        assert 0 <= counts[lid] <= shape[0] * shape[1]


def test_erk_rejects_out_of_range_sparsity():
    with pytest.raises(EngineError):
        erk_allocation([("a", (3, 3))], 1.0)


# -- static masks ------------------------------------------------------------------


def _reference(seed=0, tasks=None):
    cfg = small_config()
    if tasks is not None:
        cfg.suite = SuiteSpec(n_train=256, n_val=128, tasks=tasks)
    cfg.model.trunk_widths = [64, 64, 64, 64]
    cfg.model.head_hidden = 32
    suite = suite_for(cfg, seed)
    model = build_model(cfg, suite, seed)
    batches = sample_batches(suite, 5, 16, stream(seed, "saliency"))
    return model, batches


@pytest.mark.parametrize("sparsity", [0.3, 0.5, 0.7, 0.9])
def test_per_task_mask_cardinality(sparsity):
    model, batches = _reference()
    p = model.partition
    sal = {k: static_saliency(model, None, k, batches) for k in model.task_ids}
    state = masks_from_scores(p, sal, sparsity, OR)
    for k in model.task_ids:
        kept = state.task_shared_masks[k].kept + state.masks.private[k].kept
        assert kept == math.floor((1 - sparsity) * (p.m_k(k) + p.m_c) + 1e-9)
    # OR only adds trunk connections, so the merged model is never sparser.
    assert state.sparsity <= sparsity


def test_or_merge_matches_independent_top_sets():
    model, batches = _reference(1)
    p = model.partition
    sal = {k: static_saliency(model, None, k, batches) for k in model.task_ids}
    state = masks_from_scores(p, sal, 0.8, OR)
    union = np.zeros(p.m_c, bool)
    for k, sv in sal.items():
        count = math.floor(0.2 * len(sv) + 1e-9)
        threshold = np.sort(sv.scores)[::-1][count - 1]
        chosen = sv.scores > threshold
        # Fill ties at the threshold in index order.
        ties = np.flatnonzero(sv.scores == threshold)[: count - chosen.sum()]
        chosen[ties] = True
        union |= chosen[: p.m_c]
        np.testing.assert_array_equal(state.masks.private[k].bits, chosen[p.m_c :])
    np.testing.assert_array_equal(state.masks.shared.bits, union)


@pytest.mark.parametrize("sparsity", [0.3, 0.5, 0.7, 0.9])
def test_calibration_lands_in_band(sparsity):
    model, batches = _reference(2)
    sal = {k: static_saliency(model, None, k, batches) for k in model.task_ids}
    state = calibrate_from_scores(model.partition, sal, sparsity, OR, tol=0.005)
    assert sparsity <= state.sparsity <= sparsity + 0.005
    assert state.calibration_steps < 20
    assert state.internal_sparsity >= sparsity
    assert not state.diagnostics


def _disjoint_partition():
    shared = [("s", Tensor(np.zeros((10, 10))))]
    heads = {"a": [("ha", Tensor(np.zeros(1)))], "b": [("hb", Tensor(np.zeros(1)))]}
    p = ParamPartition(shared, heads)
    rank = np.linspace(2.0, 1.0, 50)
    scores = {"a": np.concatenate([rank, np.zeros(50), [10.0]]), "b": np.concatenate([np.zeros(50), rank, [10.0]])}
    sal = {k: SaliencyVector(k, "static", v, p.task_layout(k), 1) for k, v in scores.items()}
    return p, sal


def test_calibration_on_disjoint_tasks_matches_closed_form():
    """Two tasks that want disjoint trunk halves.  A per-task keep of g
    connections gives 2g of 102 kept, so only g = 5 lands in [0.9, 0.905];
    that needs a request in (1 - 6/101, 1 - 5/101], next to 1 - (1 - S)/2."""
    p, sal = _disjoint_partition()
    state = calibrate_from_scores(p, sal, 0.9, OR, tol=0.005)
    assert state.sparsity == 1 - 10 / 102
    assert 1 - 6 / 101 < state.internal_sparsity <= 1 - 5 / 101
    assert state.internal_sparsity == pytest.approx(1 - (1 - 0.9) / 2, abs=0.01)
    a, b = state.task_shared_masks["a"].bits, state.task_shared_masks["b"].bits
    assert not (a & b).any()


def test_calibration_reports_unreachable_band():
    p, sal = _disjoint_partition()
    # 2g / 102 can never land in a band this narrow around 0.9.
    state = calibrate_from_scores(p, sal, 0.9, OR, tol=1e-6)
    assert state.diagnostics and "calibration" in state.diagnostics[0]
    assert state.sparsity >= 0.9


def test_identical_tasks_need_one_calibration_step():
    tasks = [TaskDef("a", "regression"), TaskDef("b", "regression", copy_of="a")]
    model, batches = _reference(3, tasks)
    copy_head(model, "a", "b")
    state = generate_masks(model, "disparse", "static", SparsityTarget(0.9), OR, batches)
    assert state.calibration_steps == 1
    np.testing.assert_array_equal(state.task_shared_masks["a"].bits, state.task_shared_masks["b"].bits)
    np.testing.assert_array_equal(state.masks.shared.bits, state.task_shared_masks["a"].bits)
    assert 0.9 <= state.sparsity <= 0.905


def test_erk_scope_per_layer_counts():
    model, batches = _reference(4)
    sal = {k: static_saliency(model, None, k, batches) for k in model.task_ids}
    state = masks_from_scores(model.partition, sal, 0.9, OR, scope="erk")
    for k, sv in sal.items():
        counts = erk_layer_counts(list(sv.layout), 0.9)
        head = state.masks.private[k]
        for span in head.layout:
            assert head.bits[span.start : span.stop].sum() == counts[span.layer_id]


def test_saliency_layout_mismatch_rejected():
    model, batches = _reference()
    sal = {k: static_saliency(model, None, k, batches) for k in model.task_ids}
    sal["cls"], sal["reg"] = sal["reg"], sal["cls"]
    with pytest.raises(EngineError):
        masks_from_scores(model.partition, sal, 0.5, OR)


def test_unknown_method_and_missing_rng():
    model, batches = _reference()
    with pytest.raises(EngineError):
        generate_masks(model, "lottery", "static", SparsityTarget(0.5), OR, batches)
    with pytest.raises(EngineError):
        generate_masks(model, "random", "static", SparsityTarget(0.5), OR, batches)


def test_sparsity_target_validation():
    for bad in (0.0, 1.0, -0.1):
        with pytest.raises(EngineError):
            SparsityTarget(bad)
    with pytest.raises(EngineError):
        SparsityTarget(0.5, "layerwise")


# -- dynamic -------------------------------------------------------------------------


def test_compensated_prune_rate_formula():
    assert compensated_prune_rate(0.90, 0.88, 0.30) == pytest.approx(0.4166666666666667, abs=1e-9)


def test_compensated_rate_equals_plain_rate_on_target():
    assert compensated_prune_rate(0.9, 0.9, 0.3) == pytest.approx(0.3, abs=1e-15)


def test_schedule_endpoints_and_midpoint():
    sched = DynamicSchedule(alpha=0.3, total_iterations=5000)
    assert sched.t_end == 3750
    assert sched.decay(0) == 0.3
    assert sched.decay(sched.t_end) == 0.0
    assert abs(sched.decay(sched.t_end // 2) - 0.15) <= 1e-12
    assert sched.decay(4000) == 0.0


def test_schedule_update_grid():
    sched = DynamicSchedule(alpha=0.3, total_iterations=1000, update_interval=100)
    assert [t for t in range(1000) if sched.is_update(t)] == [100, 200, 300, 400, 500, 600, 700]


@given(st.floats(0.0, 1.0), st.integers(10, 10000))
def test_decay_monotone_and_bounded(alpha, total):
    sched = DynamicSchedule(alpha=alpha, total_iterations=total, update_interval=1)
    values = [sched.decay(t) for t in range(0, sched.t_end + 1, max(1, sched.t_end // 50))]
    assert all(0.0 <= v <= alpha for v in values)
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_schedule_validation():
    with pytest.raises(EngineError):
        DynamicSchedule(update_interval=0)
    with pytest.raises(EngineError):
        DynamicSchedule(alpha=1.5)
    with pytest.raises(EngineError):
        DynamicSchedule(total_iterations=4, end_fraction=1.0)


def _dynamic_setup(seed=0, tasks=None):
    cfg = small_config()
    if tasks is not None:
        cfg.suite = SuiteSpec(n_train=256, n_val=128, tasks=tasks)
    suite = suite_for(cfg, seed)
    model = build_model(cfg, suite, seed)
    state = init_dynamic_state(model, SparsityTarget(0.9), stream(seed, "masks"))
    return cfg, suite, model, state


def test_init_state_hits_erk_budgets_and_zeroes_weights():
    _, _, model, state = _dynamic_setup()
    params = dict(model.parameters())
    for mask in state.masks.all_masks():
        for span in mask.layout:
            bits = mask.bits[span.start : span.stop]
            assert bits.sum() == state.layer_targets[span.layer_id]
            assert not params[span.layer_id].data.reshape(-1)[~bits].any()
    assert state.masks.kept == round(0.1 * model.partition.m)


@pytest.mark.parametrize("method", ["disparse", "baseline-combined"])
def test_dynamic_counts_return_to_target(method):
    cfg, suite, model, state = _dynamic_setup(1)
    sched = DynamicSchedule(alpha=0.3, total_iterations=200, update_interval=20)
    rng = stream(1, "grow")
    target = sum(state.layer_targets.values())
    saw_excess = False
    for t in range(20, sched.t_end + 1, 20):
        batches = sample_batches(suite, 1, 16, rng)
        state, rec = dynamic_step(state, model, sched, OR, batches, t, method)
        active = state.masks.kept
        assert rec["active"] == active and rec["target_active"] == target
        # Any excess is produced by this update's merge alone: nothing from
        # the previous update is carried over.
        assert active - target == rec["merge_excess"] - rec["shortfall"]
        if rec["merge_excess"] == 0 and rec["shortfall"] == 0:
            assert active == target
        saw_excess |= rec["merge_excess"] > 0
    if method == "baseline-combined":
        assert not saw_excess
    else:
        assert saw_excess


def test_dynamic_identical_tasks_never_overshoot():
    tasks = [TaskDef("a", "regression"), TaskDef("b", "regression", copy_of="a")]
    cfg, suite, model, _ = _dynamic_setup(2, tasks)
    copy_head(model, "a", "b")
    # Same masks on both heads, so both tasks see identical gradients.
    state = init_dynamic_state(model, SparsityTarget(0.9), stream(2, "masks"))
    state.masks.private["b"] = Mask("b", state.masks.private["a"].bits.copy(), state.masks.private["b"].layout)
    copy_head(model, "a", "b")
    model.apply_masks_(state.masks)
    sched = DynamicSchedule(alpha=0.3, total_iterations=200, update_interval=20)
    for t in range(20, sched.t_end + 1, 20):
        state, rec = dynamic_step(state, model, sched, OR, sample_batches(suite, 1, 16, stream(t, "grow")), t)
        assert rec["merge_excess"] == 0
        assert rec["active"] == rec["target_active"]


def test_dynamic_step_reports_changes_and_grows_zeros():
    cfg, suite, model, state = _dynamic_setup(3)
    # Give every active weight a non-trivial value first.
    fit(model, state.masks, suite, 30, cfg, stream(3, "batches"))
    sched = DynamicSchedule(alpha=0.3, total_iterations=200, update_interval=20)
    before = {m.group: m.bits.copy() for m in state.masks.all_masks()}
    changed: dict[str, set[int]] = {}
    state, rec = dynamic_step(
        state, model, sched, OR, sample_batches(suite, 1, 16, stream(3, "grow")), 20,
        on_change=lambda lid, idx: changed.setdefault(lid, set()).update(idx.tolist()),
    )
    assert rec["pruned"] > 0 and rec["grown"] > 0
    params = dict(model.parameters())
    for mask in state.masks.all_masks():
        old = before[mask.group]
        for span in mask.layout:
            new_bits = mask.bits[span.start : span.stop]
            old_bits = old[span.start : span.stop]
            diff = set(np.flatnonzero(new_bits != old_bits).tolist())
            assert diff <= changed.get(span.layer_id, set())
            grown = new_bits & ~old_bits
            assert not params[span.layer_id].data.reshape(-1)[grown].any()


def test_dynamic_step_off_grid_rejected():
    cfg, suite, model, state = _dynamic_setup()
    sched = DynamicSchedule(alpha=0.3, total_iterations=200, update_interval=20)
    with pytest.raises(EngineError):
        dynamic_step(state, model, sched, OR, [], 21)
    with pytest.raises(EngineError):
        dynamic_step(state, model, sched, OR, [], 160)
    with pytest.raises(EngineError):
        dynamic_step(state, model, sched, OR, [], 20, method="magnitude")


# -- training with masks -------------------------------------------------------------


def _fingerprint(masks):
    return None if masks is None else tuple(m.bits.tobytes() for m in masks.all_masks())


def test_masks_frozen_and_weights_zero_during_static_training():
    cfg = small_config("static", "disparse", sparsity=0.8)
    suite = suite_for(cfg, 0)
    model = build_model(cfg, suite, 0)
    seen = set()

    def watch(t, masks, m):
        seen.add(_fingerprint(masks))
        params = dict(m.parameters())
        for mask in masks.all_masks():
            for span in mask.layout:
                off = ~mask.bits[span.start : span.stop]
                assert not params[span.layer_id].data.reshape(-1)[off].any()

    result = train(model, suite, "static", "disparse", cfg, 0, observer=watch)
    assert seen == {_fingerprint(result.masks)}


def test_dynamic_masks_change_only_on_update_grid():
    cfg = small_config("dynamic", "disparse", sparsity=0.8)
    suite = suite_for(cfg, 0)
    model = build_model(cfg, suite, 0)
    sched = DynamicSchedule(cfg.schedule.alpha, cfg.optim.iterations, cfg.schedule.end_fraction, cfg.schedule.update_interval)
    history = []
    train(model, suite, "dynamic", "disparse", cfg, 0, observer=lambda t, masks, m: history.append((t, _fingerprint(masks))))
    changes = [t for (_, a), (t, b) in zip(history, history[1:]) if a != b]
    assert changes and all(sched.is_update(t) for t in changes)
    assert max(changes) <= sched.t_end


# -- single task reduction -----------------------------------------------------------


def _single_task_config(paradigm, method):
    cfg = small_config(paradigm, method, sparsity=0.8)
    cfg.suite = SuiteSpec(n_train=256, n_val=128, tasks=[TaskDef("only", "classification")])
    cfg.pretrain.finetune_iterations = 50
    return cfg.validate()


@pytest.mark.parametrize("paradigm", ["static", "dynamic", "pretrained"])
def test_single_task_matches_combined_baseline(paradigm):
    masks = {}
    for method in ("disparse", "baseline-combined"):
        cfg = _single_task_config(paradigm, method)
        suite = suite_for(cfg, 5)
        model = build_model(cfg, suite, 5)
        if paradigm == "pretrained":
            dense = small_config("dense", "dense")
            dense.suite = cfg.suite
            fit(model, None, suite, 200, dense, stream(5, "batches"))
            model.trained_iterations = 200
        masks[method] = train(model, suite, paradigm, method, cfg, 5).masks
    assert masks["disparse"] == masks["baseline-combined"]
