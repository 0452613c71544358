"""Distillation losses and the teacher-guided training loop.

The combined-loss gradient is checked two ways that share no code: central
finite differences of the public scalar loss, and the weight delta from a
single momentum-free SGD step.
"""

import numpy as np
import pytest

import xcam.distill as DIST
import xcam.zoo as ZOO
from conftest import make_separable_dataset, make_tiny_net


def small_pair(seed=0, size=12):
    """(student, teacher) sharing input shape, student strictly smaller."""
    teacher = make_tiny_net(seed=seed, size=size, channels=(4, 6))
    student = make_tiny_net(seed=seed + 50, size=size, channels=(2, 3))
    assert student.param_count() < teacher.param_count()
    return student, teacher


def test_interpret_loss_identical_models_zero():
    model = make_tiny_net(seed=1)
    image = np.random.default_rng(1).random((3, 12, 12))
    assert DIST.interpret_loss(model, model, image, 0) == 0.0


def test_interpret_loss_nonnegative_and_class_checked():
    student, teacher = small_pair(2)
    image = np.random.default_rng(2).random((3, 12, 12))
    assert DIST.interpret_loss(student, teacher, image, 1) >= 0.0
    with pytest.raises(ValueError, match="class_index"):
        DIST.interpret_loss(student, teacher, image, 3)


def test_map_mismatch_hand_case():
    # ||2L - L||^2 = ||L||^2 = 3
    L = np.array([[1.0, 1.0], [1.0, 0.0]])
    assert DIST.map_mismatch(2.0 * L, L) == 3.0
    with pytest.raises(ValueError, match="differ"):
        DIST.map_mismatch(np.ones((2, 2)), np.ones((3, 3)))


def test_kd_loss_identical_logits_zero():
    t = np.array([1.5, -0.5, 3.0])
    assert DIST.kd_loss(t, t, 4.0) == pytest.approx(0.0, abs=1e-12)


def test_kd_loss_brute_force_two_term():
    t = np.array([2.0, 0.0])
    s = np.array([0.0, 2.0])
    pt = np.exp(t) / np.exp(t).sum()
    ps = np.exp(s) / np.exp(s).sum()
    expected = float((pt * np.log(pt / ps)).sum())
    assert DIST.kd_loss(s, t, 1.0) == pytest.approx(expected, rel=1e-12)


def test_kd_loss_large_temperature_plateau():
    # T^2 * KL approaches sum((t - mean t) - (s - mean s))^2 / (2K): the
    # KL itself decays to 0 like 1/T^2 while the T^2 scale holds it finite
    t = np.array([2.0, 0.0])
    s = np.array([0.0, 2.0])
    v = DIST.kd_loss(s, t, 1e4)
    assert v == pytest.approx(2.0, rel=1e-4)
    assert v / 1e4 ** 2 == pytest.approx(0.0, abs=1e-6)


def test_kd_loss_validation():
    with pytest.raises(ValueError, match="temperature"):
        DIST.kd_loss(np.ones(3), np.ones(3), 0.0)
    with pytest.raises(ValueError, match="class count"):
        DIST.kd_loss(np.ones(3), np.ones(4), 1.0)


def test_config_validation():
    with pytest.raises(ValueError, match="lambda_interpret"):
        DIST.DistillConfig(lambda_interpret=-0.1)
    with pytest.raises(ValueError, match="kd_temperature"):
        DIST.DistillConfig(kd_temperature=0.0)
    with pytest.raises(ValueError, match="method"):
        DIST.DistillConfig(saliency_method="cam")


def test_exp_student_loss_reduces_to_cross_entropy():
    student, teacher = small_pair(3)
    rng = np.random.default_rng(3)
    X = rng.random((5, 3, 12, 12))
    y = rng.integers(0, 3, size=5)
    cfg = DIST.DistillConfig(lambda_interpret=0.0, use_kd=False)
    got = DIST.exp_student_loss((X, y), student, teacher, cfg)
    from xcam.graph import trace

    tr = trace(student, X)
    expected = float(ZOO.cross_entropy(tr.logits, y).value)
    assert got == expected


def test_exp_student_loss_finite_with_all_terms():
    student, teacher = small_pair(4)
    rng = np.random.default_rng(4)
    X = rng.random((4, 3, 12, 12))
    y = rng.integers(0, 3, size=4)
    for method in ("grad_cam", "grad_cam_pp", "grad_cam_pp_perp"):
        cfg = DIST.DistillConfig(
            lambda_interpret=0.05, use_kd=True, kd_temperature=4.0, saliency_method=method
        )
        assert np.isfinite(DIST.exp_student_loss((X, y), student, teacher, cfg))


def test_plain_config_matches_reference_trainer_bitwise():
    student, teacher = small_pair(5)
    X, y = make_separable_dataset(n=12, size=12, seed=5)
    y = y % 3
    tcfg = ZOO.TrainConfig(learning_rate=0.02, momentum=0.9, epochs=3, batch_size=4, seed=7)
    dcfg = DIST.DistillConfig(lambda_interpret=0.0, use_kd=False, train=tcfg)
    via_distill, traces = DIST.distill_train(student, teacher, (X, y), dcfg)
    via_plain, losses = ZOO.train(student, (X, y), tcfg)
    for a, b in zip(via_distill.layers, via_plain.layers):
        if a.weight is not None:
            assert np.array_equal(a.weight, b.weight)
            assert np.array_equal(a.bias, b.bias)
    assert traces["total"] == losses
    assert traces["interpret"] == [0.0, 0.0, 0.0]


def test_combined_loss_gradient_matches_finite_difference():
    student, teacher = small_pair(6)
    rng = np.random.default_rng(6)
    X = rng.random((4, 3, 12, 12))
    y = rng.integers(0, 3, size=4)
    lr = 1e-3
    tcfg = ZOO.TrainConfig(learning_rate=lr, momentum=0.0, epochs=1, batch_size=4, seed=0)
    dcfg = DIST.DistillConfig(
        lambda_interpret=0.05, use_kd=True, kd_temperature=3.0, train=tcfg
    )
    before = [(np.copy(s.weight), np.copy(s.bias)) if s.weight is not None else None
              for s in student.layers]
    stepped, _ = DIST.distill_train(student, teacher, (X, y), dcfg)

    def loss_with(layer_i, flat_i, delta):
        probe = student.copy()
        probe.layers[layer_i].weight.ravel()[flat_i] += delta
        return DIST.exp_student_loss((X, y), probe, teacher, dcfg)

    h = 1e-5
    checked = 0
    for layer_i, snap in enumerate(before):
        if snap is None:
            continue
        g_impl = (snap[0] - stepped.layers[layer_i].weight) / lr
        # probe the strongest few gradient entries of each parameter tensor
        order = np.argsort(-np.abs(g_impl).ravel())[:3]
        for flat_i in order:
            g = g_impl.ravel()[flat_i]
            if abs(g) < 1e-6:
                continue
            fd = (loss_with(layer_i, flat_i, h) - loss_with(layer_i, flat_i, -h)) / (2 * h)
            assert abs(fd - g) / max(abs(fd), abs(g)) < 1e-3
            checked += 1
    assert checked >= 6


def test_teacher_untouched_and_deterministic():
    student, teacher = small_pair(7)
    X, y = make_separable_dataset(n=8, size=12, seed=7)
    y = y % 3
    t_before = [(np.copy(s.weight), np.copy(s.bias)) if s.weight is not None else None
                for s in teacher.layers]
    tcfg = ZOO.TrainConfig(learning_rate=0.01, momentum=0.9, epochs=2, batch_size=4, seed=2)
    dcfg = DIST.DistillConfig(lambda_interpret=0.01, use_kd=True, train=tcfg)
    run1, traces1 = DIST.distill_train(student, teacher, (X, y), dcfg)
    run2, traces2 = DIST.distill_train(student, teacher, (X, y), dcfg)
    for snap, spec in zip(t_before, teacher.layers):
        if snap is not None:
            assert np.array_equal(snap[0], spec.weight)
            assert np.array_equal(snap[1], spec.bias)
    for a, b in zip(run1.layers, run2.layers):
        if a.weight is not None:
            assert np.array_equal(a.weight, b.weight)
    assert traces1 == traces2
    assert sorted(traces1.keys()) == ["cross_entropy", "interpret", "kd", "total"]
    assert all(len(v) == 2 for v in traces1.values())


def test_student_must_be_smaller():
    teacher = make_tiny_net(seed=0, channels=(4, 6))
    X, y = make_separable_dataset(n=4, size=12, seed=0)
    with pytest.raises(ValueError, match="fewer parameters"):
        DIST.distill_train(teacher, teacher, (X, y % 3), DIST.DistillConfig())


def test_empty_dataset_rejected():
    student, teacher = small_pair(8)
    with pytest.raises(ValueError, match="empty"):
        DIST.distill_train(
            student, teacher, (np.zeros((0, 3, 12, 12)), np.zeros(0, dtype=int)),
            DIST.DistillConfig(),
        )
