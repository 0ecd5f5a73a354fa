"""Loss surfaces, gradients and optimizer arithmetic."""

import math

import numpy as np
import pytest

from cellquant.errors import ValidationError
from cellquant.losses import (LossConfig, OptimState, adamw_step,
                              combined_seg_loss, cosine_annealing_lr,
                              focal_loss, frequency_weights, kd_loss,
                              log_softmax, softmax_T, spectral_decoupling,
                              svls_targets, weighted_cross_entropy)
from helpers import fd_gradient, max_rel_err, reflect_index


# ----------------------------------------------------------------- config

def test_loss_config_defaults():
    cfg = LossConfig()
    assert cfg.focal_gamma == 2.0
    assert cfg.sd_lambda == 0.01
    assert cfg.svls_kernel_size == 3 and cfg.svls_sigma == 1.0
    assert cfg.use_svls is True
    assert (cfg.kd_temperature, cfg.kd_alpha, cfg.kd_beta) == (1.0, 0.0, 1.0)


@pytest.mark.parametrize("kw", [
    {"kd_temperature": 0.5},
    {"kd_alpha": -0.1},
    {"kd_beta": -1.0},
    {"focal_gamma": -0.5},
    {"sd_lambda": -1e-9},
    {"svls_kernel_size": 4},
    {"svls_kernel_size": -3},
    {"svls_sigma": 0.0},
    {"class_weights": [1.0, -2.0]},
])
def test_loss_config_rejects(kw):
    with pytest.raises(ValidationError):
        LossConfig(**kw)


# --------------------------------------------------------------- softmax

def test_log_softmax_rows_normalize():
    rng = np.random.default_rng(0)
    z = rng.normal(scale=30, size=(5, 4))  # large logits: need max-shift
    logp = log_softmax(z)
    assert np.allclose(np.exp(logp).sum(axis=-1), 1.0, atol=1e-12)
    assert np.isfinite(logp).all()


def test_softmax_temperature_flattens():
    z = np.array([[2.0, 0.0, -1.0]])
    sharp = softmax_T(z, 1.0)[0]
    flat = softmax_T(z, 10.0)[0]
    assert sharp.max() > flat.max()
    assert np.allclose(flat.sum(), 1.0)
    with pytest.raises(ValidationError):
        softmax_T(z, 0.0)


# ----------------------------------------------------------- cross-entropy

def test_ce_uniform_two_class():
    z = np.zeros((1, 2))
    loss, grad = weighted_cross_entropy(z, np.array([0]))
    assert loss == pytest.approx(math.log(2.0), abs=1e-15)
    assert grad[0] == pytest.approx([-0.5, 0.5])


def test_ce_layouts_agree():
    rng = np.random.default_rng(1)
    z3 = rng.normal(size=(3, 4, 5))
    hard = rng.integers(0, 3, size=(4, 5))
    l_map, g_map = weighted_cross_entropy(z3, hard)
    l_rows, g_rows = weighted_cross_entropy(z3.reshape(3, -1).T,
                                            hard.reshape(-1))
    assert l_map == pytest.approx(l_rows, abs=1e-15)
    assert np.allclose(g_map.reshape(3, -1).T, g_rows, atol=1e-15)


def test_ce_hard_gradient_matches_fd():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(4, 3, 3))
    hard = rng.integers(0, 4, size=(3, 3))
    w = np.array([0.5, 1.0, 2.0, 1.5])
    _, grad = weighted_cross_entropy(z, hard, w)
    fd = fd_gradient(lambda q: weighted_cross_entropy(q, hard, w)[0], z)
    assert max_rel_err(grad, fd) < 1e-7


def test_ce_soft_gradient_matches_fd():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(3, 2, 2))
    soft = rng.dirichlet(np.ones(3), size=4).T.reshape(3, 2, 2)
    _, grad = weighted_cross_entropy(z, soft)
    fd = fd_gradient(lambda q: weighted_cross_entropy(q, soft)[0], z)
    assert max_rel_err(grad, fd) < 1e-7


def test_ce_weight_scaling():
    z = np.zeros((1, 2))
    base, _ = weighted_cross_entropy(z, np.array([0]))
    scaled, _ = weighted_cross_entropy(z, np.array([0]), np.array([3.0, 1.0]))
    assert scaled == pytest.approx(3.0 * base)


def test_ce_target_validation():
    z = np.zeros((2, 3))
    with pytest.raises(ValidationError):
        weighted_cross_entropy(z, np.array([0, 3]))
    with pytest.raises(ValidationError):
        weighted_cross_entropy(z, np.array([0]))
    with pytest.raises(ValidationError):
        weighted_cross_entropy(np.array([[np.inf, 0.0]]), np.array([0]))


# ---------------------------------------------------------------- focal

def test_focal_half_confidence_reference():
    z = np.zeros((1, 2))  # p = (0.5, 0.5)
    loss, _ = focal_loss(z, np.array([0]), gamma=2.0)
    assert loss == pytest.approx(0.25 * math.log(2.0), abs=1e-15)
    assert loss == pytest.approx(0.17328679513998632, abs=1e-15)


def test_focal_gamma_zero_is_cross_entropy():
    rng = np.random.default_rng(4)
    z = rng.normal(size=(3, 4, 4))
    hard = rng.integers(0, 3, size=(4, 4))
    w = np.array([1.0, 2.0, 0.5])
    fl, fg = focal_loss(z, hard, gamma=0.0, class_weights=w)
    ce, cg = weighted_cross_entropy(z, hard, w)
    assert fl == ce
    assert np.array_equal(fg, cg)


@pytest.mark.parametrize("gamma", [0.5, 1.0, 2.0, 5.0])
def test_focal_gradient_matches_fd(gamma):
    rng = np.random.default_rng(5)
    z = rng.normal(size=(3, 2, 3))
    hard = rng.integers(0, 3, size=(2, 3))
    _, grad = focal_loss(z, hard, gamma=gamma)
    fd = fd_gradient(lambda q: focal_loss(q, hard, gamma=gamma)[0], z)
    assert max_rel_err(grad, fd) < 1e-6


def test_focal_saturated_prediction_is_benign():
    # p_t -> 1 makes (1-p_t)^(gamma-1) singular for gamma < 1; the
    # implementation must return finite zeros instead
    z = np.array([[40.0, 0.0]])
    loss, grad = focal_loss(z, np.array([0]), gamma=0.5)
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert np.all(np.isfinite(grad))
    assert np.allclose(grad, 0.0, atol=1e-12)


def test_focal_down_weights_easy_examples():
    easy = np.array([[4.0, 0.0]])
    hard_ex = np.array([[0.5, 0.0]])
    for z in (easy, hard_ex):
        ce, _ = weighted_cross_entropy(z, np.array([0]))
        fl, _ = focal_loss(z, np.array([0]), gamma=2.0)
        assert fl < ce
    ratio_easy = (focal_loss(easy, np.array([0]), gamma=2.0)[0]
                  / weighted_cross_entropy(easy, np.array([0]))[0])
    ratio_hard = (focal_loss(hard_ex, np.array([0]), gamma=2.0)[0]
                  / weighted_cross_entropy(hard_ex, np.array([0]))[0])
    assert ratio_easy < ratio_hard


# ----------------------------------------------------- spectral decoupling

def test_sd_single_pixel_reference():
    z = np.array([[3.0, 4.0]])
    loss, grad = spectral_decoupling(z, 1.0)
    assert loss == 12.5
    assert np.array_equal(grad, z)


def test_sd_gradient_matches_fd():
    rng = np.random.default_rng(6)
    z = rng.normal(size=(4, 3, 2))
    _, grad = spectral_decoupling(z, 0.3)
    fd = fd_gradient(lambda q: spectral_decoupling(q, 0.3)[0], z)
    assert max_rel_err(grad, fd) < 1e-7


def test_sd_zero_lambda():
    loss, grad = spectral_decoupling(np.ones((2, 2)), 0.0)
    assert loss == 0.0 and np.all(grad == 0.0)


# ------------------------------------------------------------------- svls

def test_svls_sums_to_one_and_stays_nonnegative():
    rng = np.random.default_rng(7)
    hard = rng.integers(0, 4, size=(9, 11))
    soft = svls_targets(hard, 4)
    assert soft.shape == (4, 9, 11)
    assert np.allclose(soft.sum(axis=0), 1.0, atol=1e-12)
    assert soft.min() >= 0.0


def test_svls_uniform_map_is_one_hot():
    hard = np.full((6, 6), 2, dtype=np.int64)
    soft = svls_targets(hard, 4)
    assert np.allclose(soft[2], 1.0, atol=1e-12)
    assert np.allclose(soft[[0, 1, 3]], 0.0, atol=1e-12)


def test_svls_isolated_pixel_spreads_gaussian_mass():
    hard = np.zeros((5, 5), np.int64)
    hard[2, 2] = 1
    soft = svls_targets(hard, 2, kernel_size=3, sigma=1.0)
    e5, e1 = math.exp(-0.5), math.exp(-1.0)
    total = 1.0 + 4.0 * e5 + 4.0 * e1
    assert soft[1, 2, 2] == pytest.approx(1.0 / total)
    assert soft[1, 2, 1] == pytest.approx(e5 / total)
    assert soft[1, 1, 1] == pytest.approx(e1 / total)
    assert soft[1, 2, 4] == 0.0  # outside the kernel support
    assert soft[0, 2, 2] == pytest.approx(1.0 - 1.0 / total)


def test_svls_borders_mirror_without_edge_repeat():
    rng = np.random.default_rng(8)
    hard = rng.integers(0, 3, size=(4, 5))
    soft = svls_targets(hard, 3, kernel_size=3, sigma=0.8)
    g = np.exp(-np.array([0.0, 1.0]) / (2 * 0.8**2))
    kernel = np.outer(g[[1, 0, 1]], g[[1, 0, 1]])
    kernel /= kernel.sum()
    h, w = hard.shape
    for c in range(3):
        for py in range(h):
            for px in range(w):
                acc = 0.0
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        sy = reflect_index(py + dy, h)
                        sx = reflect_index(px + dx, w)
                        acc += kernel[dy + 1, dx + 1] * (hard[sy, sx] == c)
                assert soft[c, py, px] == pytest.approx(acc, abs=1e-12)


def test_svls_validation():
    with pytest.raises(ValidationError):
        svls_targets(np.array([0, 1]), 2)  # not 2-D
    with pytest.raises(ValidationError):
        svls_targets(np.array([[0, 5]]), 2)  # class id out of range
    with pytest.raises(ValidationError):
        svls_targets(np.zeros((3, 3), np.int64), 2, kernel_size=2)


# -------------------------------------------------------------------- kd

def test_kd_identical_logits_reduce_to_ce():
    rng = np.random.default_rng(9)
    z = rng.normal(size=(3, 2, 2))
    hard = rng.integers(0, 3, size=(2, 2))
    cfg = LossConfig(kd_temperature=4.0, kd_alpha=0.5, kd_beta=0.7)
    loss, _ = kd_loss(z, z, hard, cfg)
    ce, _ = weighted_cross_entropy(z, hard)
    assert loss == pytest.approx(0.7 * ce, abs=1e-12)


def test_kd_gradient_matches_fd():
    rng = np.random.default_rng(10)
    z_s = rng.normal(size=(4, 2, 2))
    z_t = rng.normal(size=(4, 2, 2))
    hard = rng.integers(0, 4, size=(2, 2))
    cfg = LossConfig(kd_temperature=14.0, kd_alpha=0.3, kd_beta=0.7)
    _, grad = kd_loss(z_s, z_t, hard, cfg)
    fd = fd_gradient(lambda q: kd_loss(q, z_t, hard, cfg)[0], z_s)
    assert max_rel_err(grad, fd) < 1e-6


def test_kd_pure_distillation_minimized_at_teacher():
    rng = np.random.default_rng(11)
    z_t = rng.normal(size=(3, 2, 2))
    hard = rng.integers(0, 3, size=(2, 2))
    cfg = LossConfig(kd_temperature=2.0, kd_alpha=1.0, kd_beta=0.0)
    at_teacher, grad = kd_loss(z_t, z_t, hard, cfg)
    assert at_teacher == pytest.approx(0.0, abs=1e-12)
    perturbed, _ = kd_loss(z_t + 0.3, z_t, hard, cfg)
    # adding a constant per pixel leaves the softmax unchanged
    assert perturbed == pytest.approx(0.0, abs=1e-12)
    bent = z_t.copy()
    bent[0] += 1.0
    assert kd_loss(bent, z_t, hard, cfg)[0] > 0.0


def test_kd_shape_mismatch():
    cfg = LossConfig()
    with pytest.raises(ValidationError):
        kd_loss(np.zeros((2, 2, 2)), np.zeros((3, 2, 2)),
                np.zeros((2, 2), np.int64), cfg)


# ---------------------------------------------------------------- combined

def test_combined_terms_sum_to_total():
    rng = np.random.default_rng(12)
    z = rng.normal(size=(4, 6, 6))
    hard = rng.integers(0, 4, size=(6, 6))
    out = combined_seg_loss(z, hard, LossConfig())
    assert set(out.terms) == {"cross_entropy", "focal", "spectral_decoupling"}
    assert out.total == pytest.approx(sum(out.terms.values()), abs=1e-12)
    assert out.grad.shape == z.shape


def test_combined_without_svls_uses_hard_targets():
    rng = np.random.default_rng(13)
    z = rng.normal(size=(3, 4, 4))
    hard = rng.integers(0, 3, size=(4, 4))
    cfg = LossConfig(use_svls=False)
    out = combined_seg_loss(z, hard, cfg)
    ce, _ = weighted_cross_entropy(z, hard)
    assert out.terms["cross_entropy"] == pytest.approx(ce, abs=1e-15)
    with_svls = combined_seg_loss(z, hard, LossConfig())
    assert with_svls.terms["cross_entropy"] != out.terms["cross_entropy"]


def test_combined_gradient_matches_fd():
    rng = np.random.default_rng(14)
    z = rng.normal(size=(3, 3, 3))
    hard = rng.integers(0, 3, size=(3, 3))
    cfg = LossConfig(class_weights=np.array([0.5, 1.5, 1.0]))
    out = combined_seg_loss(z, hard, cfg)
    fd = fd_gradient(lambda q: combined_seg_loss(q, hard, cfg).total, z)
    assert max_rel_err(out.grad, fd) < 1e-6


def test_combined_requires_map_layout():
    with pytest.raises(ValidationError):
        combined_seg_loss(np.zeros((4, 3)), np.zeros(4, np.int64),
                          LossConfig())


# ---------------------------------------------------------------- optimizer

def test_adamw_decay_only():
    state = OptimState.init((1,), lr=0.1, weight_decay=0.01)
    p, new = adamw_step(np.array([1.0]), np.array([0.0]), state)
    assert p[0] == pytest.approx(0.999, abs=1e-12)
    assert new.t == 1


def test_adamw_unit_gradient():
    state = OptimState.init((1,), lr=0.1, weight_decay=0.0)
    p, _ = adamw_step(np.array([0.0]), np.array([1.0]), state)
    assert p[0] == pytest.approx(-0.1, abs=1e-8)


def test_adamw_two_steps_match_hand_rollout():
    lr, b1, b2, eps, wd = 0.05, 0.9, 0.999, 1e-8, 0.1
    state = OptimState.init((2,), lr=lr, beta1=b1, beta2=b2, eps=eps,
                            weight_decay=wd)
    p = np.array([0.3, -0.2])
    g1 = np.array([0.5, -1.0])
    g2 = np.array([-0.25, 0.75])
    m = v = np.zeros(2)
    q = p.copy()
    for t, g in ((1, g1), (2, g2)):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        q = q - lr * (mh / (np.sqrt(vh) + eps) + wd * q)
    out, state = adamw_step(p, g1, state)
    out, state = adamw_step(out, g2, state)
    assert np.allclose(out, q, atol=1e-15)
    assert state.t == 2


def test_adamw_does_not_mutate_inputs():
    state = OptimState.init((2,))
    p = np.array([1.0, 2.0])
    g = np.array([0.1, 0.2])
    adamw_step(p, g, state)
    assert np.array_equal(p, [1.0, 2.0])
    assert state.t == 0 and np.all(state.m == 0.0)


def test_adamw_shape_mismatch():
    with pytest.raises(ValidationError):
        adamw_step(np.zeros(2), np.zeros(3), OptimState.init((2,)))


# ---------------------------------------------------------------- schedule

def test_cosine_schedule_endpoints_and_midpoint():
    assert cosine_annealing_lr(0, 100, 1e-5, 1e-3) == pytest.approx(1e-3)
    assert cosine_annealing_lr(100, 100, 1e-5, 1e-3) == pytest.approx(1e-5)
    mid = cosine_annealing_lr(50, 100, 1e-5, 1e-3)
    assert mid == pytest.approx((1e-3 + 1e-5) / 2)
    assert cosine_annealing_lr(250, 100, 1e-5, 1e-3) == 1e-5


def test_cosine_schedule_monotone_decreasing():
    values = [cosine_annealing_lr(s, 40, 0.0, 1.0) for s in range(41)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_cosine_schedule_validation():
    with pytest.raises(ValidationError):
        cosine_annealing_lr(0, 0, 0.0, 1.0)
    with pytest.raises(ValidationError):
        cosine_annealing_lr(-1, 10, 0.0, 1.0)
    with pytest.raises(ValidationError):
        cosine_annealing_lr(0, 10, 2.0, 1.0)


# ---------------------------------------------------------------- weights

def test_frequency_weights_reference():
    w = frequency_weights([10, 30, 60])
    assert w == pytest.approx([2.0, 2.0 / 3.0, 1.0 / 3.0])
    assert w.mean() == pytest.approx(1.0, abs=1e-15)


def test_frequency_weights_reject_nonpositive():
    with pytest.raises(ValidationError):
        frequency_weights([5, 0, 3])
