"""Model tests: naive-loop forward oracle, finite-difference gradient checks,
pseudo-label quantile oracle, optimizer unroll, parameter split round-trip."""

import numpy as np
import pytest

from fedstyle import model
from fedstyle.model import ArchConfig, IGNORE, ParamSet

ARCH = ArchConfig(in_channels=2, hidden=4, classes=3)


def naive_forward(params: ParamSet, img: np.ndarray) -> np.ndarray:
    """Direct-loop reference: conv3x3 -> affine -> relu -> linear, no matmuls."""
    a = params.arch
    bb = params.groups["backbone"]
    kernel = bb[: a.hidden * a.in_channels * 9].reshape(a.hidden, a.in_channels, 3, 3)
    kbias = bb[a.hidden * a.in_channels * 9 :]
    nm = params.groups["norm"]
    scale, shift = nm[: a.hidden], nm[a.hidden :]
    cl = params.groups["classifier"]
    cw = cl[: a.classes * a.hidden].reshape(a.classes, a.hidden)
    cb = cl[a.classes * a.hidden :]

    h, w, _ = img.shape
    out = np.zeros((h, w, a.classes))
    for y in range(h):
        for x in range(w):
            feat = np.zeros(a.hidden)
            for f in range(a.hidden):
                acc = kbias[f]
                for c in range(a.in_channels):
                    for ki in range(3):
                        for kj in range(3):
                            yy, xx = y + ki - 1, x + kj - 1
                            if 0 <= yy < h and 0 <= xx < w:
                                acc += kernel[f, c, ki, kj] * img[yy, xx, c]
                feat[f] = max(acc * scale[f] + shift[f], 0.0)
            for q in range(a.classes):
                out[y, x, q] = cb[q] + np.dot(cw[q], feat)
    return out


def flatten(params: ParamSet) -> np.ndarray:
    return np.concatenate([params.groups[k] for k in model.GROUP_NAMES])


def unflatten(vec: np.ndarray, arch: ArchConfig) -> ParamSet:
    sizes = arch.group_sizes()
    groups, off = {}, 0
    for name in model.GROUP_NAMES:
        groups[name] = vec[off : off + sizes[name]].copy()
        off += sizes[name]
    return ParamSet(arch, groups)


def finite_diff_check(loss_fn, params: ParamSet, eps: float = 1e-5) -> float:
    """Max relative error between the analytic gradient and central differences."""
    _, grad = loss_fn(params)
    g = flatten(grad)
    vec = flatten(params)
    num = np.zeros_like(vec)
    for i in range(len(vec)):
        up, down = vec.copy(), vec.copy()
        up[i] += eps
        down[i] -= eps
        lu, _ = loss_fn(unflatten(up, params.arch))
        ld, _ = loss_fn(unflatten(down, params.arch))
        num[i] = (lu - ld) / (2 * eps)
    denom = np.maximum(np.abs(num), 1e-6)
    return float(np.max(np.abs(g - num) / denom))


def seeded_case(seed: int, h: int = 6, w: int = 6):
    rng = np.random.default_rng(seed)
    params = model.init_params(ARCH, seed=seed)
    img = rng.random((h, w, ARCH.in_channels))
    labels = rng.integers(0, ARCH.classes, size=(h, w))
    teacher = rng.normal(size=(h, w, ARCH.classes))
    return params, img, labels, teacher


class TestForward:
    def test_zero_params_zero_logits(self):
        params = model.zeros_like(model.init_params(ARCH, 0))
        logits = model.forward(params, np.random.default_rng(0).random((5, 5, 2)))
        assert np.max(np.abs(logits)) == 0.0

    def test_bias_only_classifier(self):
        params = model.zeros_like(model.init_params(ARCH, 0))
        bias = np.array([1.0, -2.0, 0.5])
        params.groups["classifier"][ARCH.classes * ARCH.hidden :] = bias
        logits = model.forward(params, np.zeros((4, 4, 2)))
        assert np.allclose(logits, bias[None, None, :])

    def test_matches_naive_loop_oracle(self):
        for seed in range(5):
            params, img, _, _ = seeded_case(seed, 5, 7)
            fast = model.forward(params, img)
            slow = naive_forward(params, img)
            assert np.max(np.abs(fast - slow)) < 1e-10

    def test_shape_mismatch(self):
        params = model.init_params(ARCH, 0)
        with pytest.raises(ValueError):
            model.forward(params, np.zeros((4, 4, 5)))


class TestCeLoss:
    def test_uniform_logits_loss_is_log_q(self):
        params = model.zeros_like(model.init_params(ARCH, 0))
        img = np.random.default_rng(1).random((6, 6, 2))
        labels = np.zeros((6, 6), dtype=int)
        loss, _ = model.ce_loss_grad(params, img, labels)
        assert loss == pytest.approx(np.log(ARCH.classes))

    def test_peaked_correct_logits_drive_loss_to_zero(self):
        params = model.zeros_like(model.init_params(ARCH, 0))
        params.groups["classifier"][ARCH.classes * ARCH.hidden :] = [50.0, 0.0, 0.0]
        labels = np.zeros((4, 4), dtype=int)
        loss, _ = model.ce_loss_grad(params, np.zeros((4, 4, 2)), labels)
        assert loss < 1e-9

    def test_all_ignore_is_zero_loss_zero_grad(self):
        params, img, _, _ = seeded_case(0)
        labels = np.full((6, 6), IGNORE)
        loss, grad = model.ce_loss_grad(params, img, labels)
        assert loss == 0.0
        assert all(np.all(v == 0.0) for v in grad.groups.values())

    def test_pixel_permutation_invariance(self):
        params, img, labels, _ = seeded_case(2)
        loss, _ = model.ce_loss_grad(params, img, labels)
        # Per-pixel evaluation then averaging must give the same number.
        logits = model.forward(params, img)
        probs = model.softmax(logits)
        flat_p = probs.reshape(-1, ARCH.classes)
        flat_l = labels.reshape(-1)
        ref = -np.mean(np.log(flat_p[np.arange(len(flat_l)), flat_l]))
        assert loss == pytest.approx(ref, abs=1e-12)

    def test_gradient_finite_differences(self):
        params, img, labels, _ = seeded_case(3)
        labels[0, :3] = IGNORE  # mix in ignored pixels
        err = finite_diff_check(lambda p: model.ce_loss_grad(p, img, labels), params)
        assert err < 1e-4

    def test_label_shape_mismatch(self):
        params, img, _, _ = seeded_case(0)
        with pytest.raises(ValueError):
            model.ce_loss_grad(params, img, np.zeros((3, 3), dtype=int))


class TestKdLoss:
    def test_uniform_teacher_lower_bound(self):
        params, img, _, _ = seeded_case(4)
        teacher = np.zeros((6, 6, ARCH.classes))
        loss, _ = model.kd_loss_grad(params, img, teacher)
        assert loss >= np.log(ARCH.classes) - 1e-12
        uniform_student = model.zeros_like(params)
        loss_u, _ = model.kd_loss_grad(uniform_student, img, teacher)
        assert loss_u == pytest.approx(np.log(ARCH.classes))

    def test_self_teacher_loss_is_entropy(self):
        params, img, _, _ = seeded_case(5)
        logits = model.forward(params, img)
        loss, _ = model.kd_loss_grad(params, img, logits)
        probs = model.softmax(logits)
        entropy = float(-np.mean(np.sum(probs * np.log(probs), axis=-1)))
        assert loss == pytest.approx(entropy, abs=1e-12)

    def test_gradient_finite_differences(self):
        params, img, _, teacher = seeded_case(6)
        err = finite_diff_check(lambda p: model.kd_loss_grad(p, img, teacher), params)
        assert err < 1e-4

    def test_shape_mismatch(self):
        params, img, _, _ = seeded_case(0)
        with pytest.raises(ValueError):
            model.kd_loss_grad(params, img, np.zeros((6, 6, 7)))


class TestFusedLoss:
    def test_equals_component_sum(self):
        for seed in range(5):
            params, img, labels, teacher = seeded_case(seed)
            labels[1, :2] = IGNORE
            lam = 0.7
            loss_p, loss_kd, grad = model.self_training_loss_grad(
                params, img, labels, teacher, lam
            )
            ref_p, grad_p = model.ce_loss_grad(params, img, labels)
            ref_kd, grad_kd = model.kd_loss_grad(params, img, teacher)
            assert loss_p == pytest.approx(ref_p, abs=1e-12)
            assert loss_kd == pytest.approx(ref_kd, abs=1e-12)
            ref_grad = model.combine([(1.0, grad_p), (lam, grad_kd)])
            for k in grad.groups:
                assert np.max(np.abs(grad.groups[k] - ref_grad.groups[k])) < 1e-12

    def test_gradient_finite_differences(self):
        params, img, labels, teacher = seeded_case(7)

        def total(p):
            lp, lkd, g = model.self_training_loss_grad(p, img, labels, teacher, 0.5)
            return lp + 0.5 * lkd, g

        assert finite_diff_check(total, params) < 1e-4


class TestSoftmax:
    def test_rows_sum_to_one(self):
        logits = np.random.default_rng(0).normal(size=(5, 5, 4)) * 10
        probs = model.softmax(logits)
        assert np.max(np.abs(probs.sum(axis=-1) - 1.0)) < 1e-12
        assert np.all(probs >= 0.0)


class TestPseudoLabel:
    def test_permissive_gates_label_everything(self):
        logits = np.random.default_rng(0).normal(size=(6, 6, 4))
        out = model.pseudo_label(logits, conf_threshold=1e-9, class_fraction=1.0)
        assert np.array_equal(out, logits.argmax(axis=-1))
        assert not np.any(out == IGNORE)

    def test_low_confidence_pixel_ignored(self):
        q = 4
        logits = np.zeros((2, 2, q))
        logits[:, :, 0] = 8.0  # near-certain class 0 everywhere...
        logits[0, 0] = [0.1, 0.0, 0.0, 0.0]  # ...except one ambivalent pixel
        out = model.pseudo_label(logits, conf_threshold=0.9, class_fraction=0.5)
        assert out[0, 0] == IGNORE
        assert np.all(out[logits.max(axis=-1) == 8.0] == 0)

    def test_against_quantile_oracle(self):
        for seed in range(10):
            logits = np.random.default_rng(seed).normal(size=(8, 8, 5)) * 2
            conf_threshold, class_fraction = 0.9, 0.66
            out = model.pseudo_label(logits, conf_threshold, class_fraction)

            probs = model.softmax(logits)
            conf = probs.max(axis=-1)
            arg = probs.argmax(axis=-1)
            expected = np.full(arg.shape, IGNORE, dtype=np.int64)
            for q in range(5):
                mask = arg == q
                if not mask.any():
                    continue
                tau = min(conf_threshold, float(np.quantile(conf[mask], 1 - class_fraction)))
                expected[mask & (conf >= tau)] = q
            assert np.array_equal(out, expected)

    def test_parameter_validation(self):
        logits = np.zeros((2, 2, 3))
        with pytest.raises(ValueError):
            model.pseudo_label(logits, 1.5, 0.5)
        with pytest.raises(ValueError):
            model.pseudo_label(logits, 0.9, 0.0)


class TestSgdStep:
    def test_zero_grad_is_noop(self):
        params = model.init_params(ARCH, 0)
        out, _ = model.sgd_step(params, model.zeros_like(params), lr=0.1)
        for k in params.groups:
            assert np.array_equal(out.groups[k], params.groups[k])

    def test_first_step_is_plain_sgd(self):
        params, _, _, _ = seeded_case(0)
        grad = model.init_params(ARCH, 99)
        out, vel = model.sgd_step(params, grad, lr=0.2)
        for k in params.groups:
            assert np.max(np.abs(out.groups[k] - (params.groups[k] - 0.2 * grad.groups[k]))) < 1e-15
            assert np.array_equal(vel[k], grad.groups[k])

    def test_three_steps_match_hand_unrolled_recurrence(self):
        params = model.init_params(ARCH, 1)
        grads = [model.init_params(ARCH, 100 + i) for i in range(3)]
        lr = 0.05

        p, v = params, None
        for g in grads:
            p, v = model.sgd_step(p, g, lr, v)

        for k in params.groups:
            vel = np.zeros_like(params.groups[k])
            ref = params.groups[k].copy()
            for g in grads:
                vel = model.MOMENTUM * vel + g.groups[k]
                ref = ref - lr * vel
            assert np.max(np.abs(p.groups[k] - ref)) < 1e-12

    def test_bad_lr(self):
        params = model.init_params(ARCH, 0)
        with pytest.raises(ValueError):
            model.sgd_step(params, model.zeros_like(params), lr=0.0)


class TestSplitMerge:
    def test_empty_cluster_groups_puts_everything_in_phi(self):
        params = model.init_params(ARCH, 0)
        theta, phi = model.split_params(params, set())
        assert theta == {}
        assert set(phi) == set(model.GROUP_NAMES)

    def test_round_trip_bit_exact(self):
        params = model.init_params(ARCH, 3)
        for groups in (set(), {"norm"}, {"classifier"}, {"backbone", "norm"}):
            theta, phi = model.split_params(params, groups)
            merged = model.merge_params(ARCH, theta, phi)
            for k in params.groups:
                assert np.array_equal(merged.groups[k], params.groups[k])

    def test_unknown_group_errors(self):
        params = model.init_params(ARCH, 0)
        with pytest.raises(ValueError):
            model.split_params(params, {"batchnorm"})
        with pytest.raises(ValueError):
            model.merge_params(ARCH, {"norm": params.groups["norm"]}, {})

    def test_overlap_errors(self):
        params = model.init_params(ARCH, 0)
        theta, phi = model.split_params(params, {"norm"})
        with pytest.raises(ValueError):
            model.merge_params(ARCH, theta, {**phi, "norm": theta["norm"]})


def test_init_params_seeded_and_bounded():
    a = model.init_params(ARCH, 7)
    b = model.init_params(ARCH, 7)
    c = model.init_params(ARCH, 8)
    for k in a.groups:
        assert np.array_equal(a.groups[k], b.groups[k])
    assert any(not np.array_equal(a.groups[k], c.groups[k]) for k in a.groups)
    a.validate()
    # Norm starts at identity.
    assert np.array_equal(a.groups["norm"], np.concatenate([np.ones(4), np.zeros(4)]))
    bound = 1.0 / np.sqrt(2 * 9)
    assert np.max(np.abs(a.groups["backbone"])) <= bound


def test_combine_weighted_sum():
    a = model.init_params(ARCH, 0)
    b = model.init_params(ARCH, 1)
    out = model.combine([(0.25, a), (0.75, b)])
    for k in a.groups:
        assert np.max(np.abs(out.groups[k] - (0.25 * a.groups[k] + 0.75 * b.groups[k]))) < 1e-15
    with pytest.raises(ValueError):
        model.combine([])
