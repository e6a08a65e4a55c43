import math
from dataclasses import replace

import numpy as np
import pytest

from oracles import (
    brute_delta,
    central_difference,
    cluster_is_fine,
    merge_sequences,
    random_connected_graph,
    random_example,
    sequence_score,
)
from rnnprop.imagecore import GroundTruth, LabelMask
from rnnprop.inference import greedy_merge
from rnnprop.nnet import GradStore
from rnnprop.overseg import Segmentation, build_region_graph
from rnnprop.rnnmodel import MergeTree, ModelParams, Tape, init_params, recompute_tree_score, tree_score
from rnnprop.training import (
    InstanceLabeling,
    NonFiniteGradientError,
    OptimizerState,
    TrainConfig,
    example_loss_and_grad,
    greedy_augmented_tree,
    greedy_correct_tree,
    instances_from_classes,
    label_regions,
    margin_delta,
    merge_ok,
    merging_loss_and_grad,
    objectness_labels,
    objectness_loss_and_grad,
    sgd_step,
    train,
    write_train_log,
)


def tree_from_seq(tape, n, seq):
    return MergeTree(tape, n, [a for a, _ in seq], [b for _, b in seq], [0.0] * len(seq),
                     list(range(n + len(seq))))


def dummy_tape(n, F=3, D=2):
    return Tape(init_params(F, D, 0), np.zeros((n, F)), np.ones(n), np.zeros((n, 4), int))


# --- labeling -------------------------------------------------------------------


def _gt(mask):
    return GroundTruth([], LabelMask(np.asarray(mask, dtype=np.int32)))


def test_label_regions_two_adjacent_object_regions():
    # five vertical stripe regions; the object covers regions 2 and 3
    region_of = np.repeat(np.arange(5)[None, :], 3, axis=0)
    seg = Segmentation(region_of.astype(np.int32), 5)
    mask = np.isin(region_of, [2, 3]).astype(np.int32)
    lab = label_regions(seg, build_region_graph(seg), _gt(mask))
    assert lab.instance.tolist() == [0, 0, 1, 1, 2]  # background splits into two components
    assert lab.region_class.tolist() == [0, 0, 1, 1, 0]
    assert lab.totals[1] == 2


def test_label_regions_one_background_component():
    region_of = np.array([[0, 0, 1, 1], [0, 0, 2, 2], [3, 3, 3, 3]], np.int32)
    seg = Segmentation(region_of, 4)
    mask = np.isin(region_of, [1, 2]).astype(np.int32)
    lab = label_regions(seg, build_region_graph(seg), _gt(mask))
    assert lab.instance.tolist() == [0, 1, 1, 0]
    assert lab.totals == {0: 2, 1: 2}


def test_label_regions_split_object_gets_two_instances():
    region_of = np.repeat(np.arange(3)[None, :], 2, axis=0).astype(np.int32)
    seg = Segmentation(region_of, 3)
    mask = np.where(region_of == 1, 0, 5).astype(np.int32)
    lab = label_regions(seg, build_region_graph(seg), _gt(mask))
    assert lab.region_class.tolist() == [5, 0, 5]
    assert len(set(lab.instance.tolist())) == 3


def test_label_regions_majority_and_ties():
    region_of = np.zeros((1, 10), np.int32)
    region_of[0, 5:] = 1
    seg = Segmentation(region_of, 2)
    mask = np.array([[1, 1, 1, 0, 0, 1, 1, 0, 0, 2]], np.int32)  # region 0: 60% object
    lab = label_regions(seg, build_region_graph(seg), _gt(mask))
    assert lab.region_class.tolist() == [1, 0]  # region 1 ties 2/2 between 0 and 1 -> background


# --- correctness rules ------------------------------------------------------------


def _two_colour_scene():
    # 2x2 grid: g1 b1 / g2 b2; greens are instance 0, blues instance 1
    edges = np.array([(0, 1), (0, 2), (1, 3), (2, 3)])
    return edges, InstanceLabeling.from_instances([0, 1, 0, 1])


def test_merge_ok_cases():
    lab = InstanceLabeling.from_instances([0, 0, 1])  # g1, g2, b1
    g1, g2, b1 = (lab.leaf_state(i) for i in range(3))
    assert merge_ok(g1, g2, lab)
    assert merge_ok(g1.union(g2, True), b1, lab)
    assert not merge_ok(g1, b1, lab)
    two = InstanceLabeling.from_instances([0, 1])
    assert merge_ok(two.leaf_state(0), two.leaf_state(1), two)


def test_margin_delta_three_leaves():
    lab = InstanceLabeling.from_instances([0, 0, 1])
    tape = dummy_tape(3)
    assert margin_delta(tree_from_seq(tape, 3, [(0, 2), (1, 3)]), lab) == 2
    assert margin_delta(tree_from_seq(tape, 3, [(0, 1), (2, 3)]), lab) == 0


def test_margin_delta_two_colour_grid():
    edges, lab = _two_colour_scene()
    tape = dummy_tape(4)
    assert margin_delta(tree_from_seq(tape, 4, [(0, 1), (2, 3), (4, 5)]), lab) == 3
    assert margin_delta(tree_from_seq(tape, 4, [(0, 2), (1, 4), (3, 5)]), lab) == 2
    assert margin_delta(tree_from_seq(tape, 4, [(0, 2), (1, 3), (4, 5)]), lab) == 0


@pytest.mark.parametrize("seed", range(30))
def test_margin_delta_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 6))
    ex = random_example(n, 3, rng)
    tape = dummy_tape(n)
    for seq in merge_sequences(n, ex.edges):
        tree = tree_from_seq(tape, n, seq)
        assert margin_delta(tree, ex.labeling) == brute_delta(n, seq, ex.labeling.instance)


@pytest.mark.parametrize("seed", range(20))
def test_greedy_trees_bounded_by_brute_force(seed):
    rng = np.random.default_rng(100 + seed)
    n = int(rng.integers(2, 7))
    F, kappa = 4, 0.7
    ex = random_example(n, F, rng)
    params = init_params(F, 3, seed)
    params.b_c[:] = 0.2
    best_aug, best_cor = -math.inf, -math.inf
    for seq in merge_sequences(n, ex.edges):
        s = sequence_score(params, ex.features, seq)
        d = brute_delta(n, seq, ex.labeling.instance)
        best_aug = max(best_aug, s + kappa * d)
        if d == 0:
            best_cor = max(best_cor, s)
    t_hat, aug = greedy_augmented_tree(ex.tape(params), ex.edges, ex.labeling, kappa)
    t_cor = greedy_correct_tree(ex.tape(params), ex.edges, ex.labeling)
    assert aug <= best_aug + 1e-12
    assert tree_score(t_cor) <= best_cor + 1e-12
    assert margin_delta(t_cor, ex.labeling) == 0
    # unclamped hinge with exact maxima is never negative
    assert best_aug - best_cor >= 0


def test_kappa_zero_is_plain_greedy():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 10))
        ex = random_example(n, 4, rng)
        params = init_params(4, 3, seed)
        t_hat, _ = greedy_augmented_tree(ex.tape(params), ex.edges, ex.labeling, 0.0)
        plain = greedy_merge(ex.tape(params), ex.edges)
        assert (t_hat.left, t_hat.right) == (plain.left, plain.right)


def test_large_kappa_prefers_violations():
    edges, lab = _two_colour_scene()
    params = init_params(3, 2, 0)
    tape = Tape(params, np.random.default_rng(0).normal(size=(4, 3)), np.ones(4), np.zeros((4, 4), int))
    t_hat, aug = greedy_augmented_tree(tape, edges, lab, 1e6)
    first = (t_hat.left[0], t_hat.right[0])
    assert first in {(0, 1), (2, 3)}  # a mixed-colour merge
    assert margin_delta(t_hat, lab) == 3


def test_single_instance_correct_equals_greedy():
    rng = np.random.default_rng(5)
    edges = random_connected_graph(6, rng)
    lab = InstanceLabeling.from_instances([0] * 6)
    params = init_params(4, 3, 1)
    tape = Tape(params, rng.normal(size=(6, 4)), np.ones(6), np.zeros((6, 4), int))
    t_cor = greedy_correct_tree(tape, edges, lab)
    plain = greedy_merge(tape, edges)
    assert (t_cor.left, t_cor.right) == (plain.left, plain.right)


def test_score_scaling_keeps_greedy_choice():
    rng = np.random.default_rng(8)
    ex = random_example(7, 4, rng)
    params = init_params(4, 3, 2)
    scaled = params.copy()
    scaled.W_m *= 3.5
    a = greedy_merge(ex.tape(params), ex.edges)
    b = greedy_merge(ex.tape(scaled), ex.edges)
    assert (a.left, a.right) == (b.left, b.right)


@pytest.mark.parametrize("seed", range(25))
def test_correct_merge_always_exists(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 9))
    edges = random_connected_graph(n, rng, extra=0.2)
    inst = instances_from_classes(rng.integers(3, size=n), edges)
    adj = {(int(a), int(b)) for a, b in edges} | {(int(b), int(a)) for a, b in edges}
    seen = set()

    def touching(c, d):
        return any((i, j) in adj for i in c for j in d)

    def visit(forest):
        if forest in seen or len(forest) == 1:
            return
        seen.add(forest)
        roots = sorted(forest, key=sorted)
        ok = [(c, d) for i, c in enumerate(roots) for d in roots[i + 1:]
              if touching(c, d) and cluster_is_fine(c | d, inst)]
        assert ok, f"stuck at {roots}"
        for c, d in ok:
            visit((forest - {c, d}) | {c | d})

    visit(frozenset(frozenset([i]) for i in range(n)))


# --- losses -------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(15))
def test_hinge_non_negative(seed):
    rng = np.random.default_rng(seed)
    ex = random_example(int(rng.integers(2, 12)), 5, rng)
    loss, grads, t_hat, t_cor = merging_loss_and_grad(ex, init_params(5, 4, seed), 0.5)
    assert loss >= 0.0
    if loss == 0.0:
        assert all(not g.any() for g in grads.grads.values())


def test_identical_structure_gives_zero_gradient():
    # a single instance: every tree is correct, so both greedy trees coincide
    rng = np.random.default_rng(2)
    ex = random_example(6, 4, rng)
    ex = replace(ex, labeling=InstanceLabeling.from_instances([0] * 6))
    loss, grads, t_hat, t_cor = merging_loss_and_grad(ex, init_params(4, 3, 0), 1.0)
    assert t_hat.structure() == t_cor.structure()
    assert loss == 0.0 and all(not g.any() for g in grads.grads.values())


def _merge_step(seed, kappa=0.5):
    rng = np.random.default_rng(seed)
    ex = random_example(int(rng.integers(3, 8)), 5, rng)
    params = init_params(5, 4, seed)
    before, grads, t_hat, t_cor = merging_loss_and_grad(ex, params, kappa)
    cfg = TrainConfig(momentum=0.0, weight_decay=0.0, lr=1e-3)
    sgd_step(params, grads, OptimizerState.like(params), cfg)
    return ex, params, before, t_hat, t_cor


def test_sgd_step_on_fixed_example_does_not_increase_loss():
    ex, params, before, _, _ = _merge_step(0)
    assert before > 0
    assert merging_loss_and_grad(ex, params, 0.5)[0] <= before + 1e-9


@pytest.mark.parametrize("seed", range(30))
def test_sgd_step_descends_with_trees_held_fixed(seed):
    # the greedy maxima may move to other trees after a step; the hinge
    # evaluated on the trees that produced the gradient must not rise
    ex, params, before, t_hat, t_cor = _merge_step(seed)
    after = (recompute_tree_score(params, ex.features, t_hat) + 0.5 * margin_delta(t_hat, ex.labeling)
             - recompute_tree_score(params, ex.features, t_cor))
    assert max(after, 0.0) <= before + 1e-9


def test_objectness_label_cases():
    gt = np.array([[5, 0, 15, 10]])
    boxes = np.array([[5, 0, 15, 10], [0, 0, 10, 10], [40, 40, 50, 50], [5, 0, 12, 10]])
    assert objectness_labels(boxes, gt).tolist() == [1, -1, 0, 1]
    # best IoU 0.35 is in the dead zone
    assert objectness_labels(np.array([[0, 0, 7, 10]]), np.array([[0, 0, 20, 10]])).tolist() == [-1]
    assert objectness_labels(boxes, np.zeros((0, 4))).tolist() == [0, 0, 0, 0]


def test_objectness_loss_values():
    params = ModelParams.zeros(3, 2)
    tape = Tape(params, np.ones((1, 3)), [1], [(0, 0, 1, 1)])
    loss, _, _ = objectness_loss_and_grad(tape, [(0, 1)], params)
    assert loss == pytest.approx(math.log(2), abs=1e-15)
    assert objectness_loss_and_grad(tape, [], params)[0] == 0.0
    confident = ModelParams.zeros(3, 2)
    confident.b_o0[:] = 1.0
    confident.W_o1[1, :] = 30.0
    loss, _, _ = objectness_loss_and_grad(Tape(confident, np.ones((1, 3)), [1], [(0, 0, 1, 1)]), [(0, 1)],
                                          confident)
    assert loss < 1e-20


def test_objectness_gradient_three_regions():
    rng = np.random.default_rng(1)
    F, D = 4, 3
    feats = rng.normal(size=(3, F))
    params = init_params(F, D, 6)
    params.b_s[:] = 0.05
    params.b_o0[:] = 0.05
    samples = [(0, 1), (1, 0), (2, 1)]

    def loss_of(p):
        tape = Tape(p, feats, np.ones(3), np.zeros((3, 4), int))
        return objectness_loss_and_grad(tape, samples, p)[0]

    tape = Tape(params, feats, np.ones(3), np.zeros((3, 4), int))
    _, grads, gx = objectness_loss_and_grad(tape, samples, params)
    tape.backward(gx, grads)
    num = central_difference(loss_of, params)
    for name, _ in params.tensors():
        err = np.abs(grads[name] - num[name]) / np.maximum(1.0, np.abs(num[name]))
        assert err.max() < 1e-4, name


# --- optimiser ----------------------------------------------------------------------


def _one_param_store(value):
    g = GradStore({name: shape for name, shape in ModelParams.shapes(1, 1).items()})
    g.grads["W_s"][:] = value
    return g


def test_sgd_plain_step():
    p = ModelParams.zeros(1, 1)
    p.W_s[:] = 1.0
    sgd_step(p, _one_param_store(2.0), OptimizerState.like(p), TrainConfig(momentum=0, weight_decay=0, lr=0.1))
    assert p.W_s[0, 0] == pytest.approx(0.8, abs=1e-15)


def test_sgd_velocity_decays_without_gradient():
    p = ModelParams.zeros(1, 1)
    state = OptimizerState.like(p)
    state.velocity["W_s"][:] = 1.0
    cfg = TrainConfig(momentum=0.5, weight_decay=0.0)
    for k in range(1, 4):
        sgd_step(p, _one_param_store(0.0), state, cfg)
        assert state.velocity["W_s"][0, 0] == 0.5 ** k
    assert p.W_s[0, 0] == 0.5 + 0.25 + 0.125


def test_sgd_two_momentum_steps_closed_form():
    p = ModelParams.zeros(1, 1)
    p.W_s[:] = 1.0
    p.b_s[:] = 1.0
    state = OptimizerState.like(p)
    cfg = TrainConfig(momentum=0.9, weight_decay=0.1, lr=0.1)
    sgd_step(p, _one_param_store(1.0), state, cfg)
    # v1 = -0.1 * (1 + 0.1 * 1) = -0.11, theta1 = 0.89
    assert p.W_s[0, 0] == pytest.approx(0.89, abs=1e-15)
    sgd_step(p, _one_param_store(1.0), state, cfg)
    # v2 = 0.9 * -0.11 - 0.1 * (1 + 0.089) = -0.2079, theta2 = 0.6821
    assert p.W_s[0, 0] == pytest.approx(0.6821, abs=1e-15)
    assert p.b_s[0] == 1.0  # no decay on biases, zero gradient


def test_sgd_rejects_non_finite():
    p = ModelParams.zeros(1, 1)
    with pytest.raises(NonFiniteGradientError) as err:
        sgd_step(p, _one_param_store(np.nan), OptimizerState.like(p), TrainConfig(), example=["s1"])
    assert err.value.tensor == "W_s" and err.value.example == ["s1"]


def test_config_validation_and_schedule():
    with pytest.raises(ValueError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ValueError):
        TrainConfig(lr=-1)
    cfg = TrainConfig(lr=1.0, lr_decay_epochs=20, lr_decay_factor=0.1)
    assert [cfg.lr_at(e) for e in (0, 19, 20, 40)] == [1.0, 1.0, 0.1, 1.0 * 0.1 ** 2]


# --- training loop ------------------------------------------------------------------


def _toy_dataset(n_examples, seed=0):
    rng = np.random.default_rng(seed)
    return [random_example(int(rng.integers(3, 8)), 6, rng) for _ in range(n_examples)]


def test_zero_epochs_returns_initial_params():
    p = init_params(6, 4, 0)
    out, history = train(_toy_dataset(3), TrainConfig(epochs=0), p)
    assert history == [] and out.to_bytes() == p.to_bytes() and out is not p


def test_training_is_deterministic_and_pure(tmp_path):
    data = _toy_dataset(5)
    p = init_params(6, 4, 0)
    snapshot = p.to_bytes()
    a, ha = train(data, TrainConfig(epochs=3, lr=1e-3), p)
    b, hb = train(data, TrainConfig(epochs=3, lr=1e-3), p)
    assert a.to_bytes() == b.to_bytes() and ha == hb
    assert p.to_bytes() == snapshot
    write_train_log(ha, tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,mean_merging_loss,mean_objectness_loss,mean_total_loss,lr" and len(lines) == 4


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        train([], TrainConfig(), init_params(2, 2, 0))


def test_example_gradient_matches_sum_of_parts():
    rng = np.random.default_rng(9)
    ex = random_example(6, 5, rng)
    params = init_params(5, 4, 3)
    lm, lo, g = example_loss_and_grad(ex, params, 0.3, 0.0)
    lm2, g2, _, _ = merging_loss_and_grad(ex, params, 0.3)
    assert lm == lm2
    for name in g.grads:
        assert np.allclose(g[name], g2[name], atol=1e-14)


@pytest.mark.slow
def test_loss_decreases_on_synthetic_scenes():
    from rnnprop.imagecore import SceneConfig, generate_scene, mix_seed
    from rnnprop.pipeline import prepare_image, training_examples

    examples = []
    for i in range(20):
        image, gt = generate_scene(SceneConfig(seed=mix_seed(7, i)))
        examples += training_examples(prepare_image(image, (100, 250)), gt, f"s{i}")
    _, history = train(examples, TrainConfig(epochs=30), init_params(64, 32, 0))
    assert history[-1].mean_total_loss < history[0].mean_total_loss
