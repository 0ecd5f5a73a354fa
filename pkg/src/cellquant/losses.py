"""Training-objective mathematics: values and analytic gradients with
respect to logits, plus the optimizer update rule and LR schedule.

No network layers live here; every function is pure array math on
logit fields so gradients can be checked against central finite
differences.  All computation is float64.

Logit fields come in two layouts: channel-first spatial (K, H, W) with
an (H, W) integer class map as hard targets, or a flat (N, K) batch
with (N,) integer targets.  Soft targets share the logit shape.  Class
channel 0 is background; losses treat it as an ordinary class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ValidationError

__all__ = [
    "LossConfig", "OptimState", "LossBreakdown",
    "log_softmax", "softmax_T",
    "weighted_cross_entropy", "focal_loss", "spectral_decoupling",
    "svls_targets", "kd_loss", "combined_seg_loss",
    "adamw_step", "cosine_annealing_lr", "frequency_weights",
]


@dataclass(slots=True)
class LossConfig:
    """Coefficients of the segmentation and distillation objectives.

    ``kd_alpha + kd_beta = 1`` in the reference configuration but is
    not enforced, so the two terms can be reweighted independently.
    """
    class_weights: np.ndarray | None = None
    focal_gamma: float = 2.0
    sd_lambda: float = 0.01
    svls_kernel_size: int = 3
    svls_sigma: float = 1.0
    use_svls: bool = True
    kd_temperature: float = 1.0
    kd_alpha: float = 0.0
    kd_beta: float = 1.0

    def __post_init__(self):
        if self.kd_temperature < 1.0:
            raise ValidationError(f"kd_temperature {self.kd_temperature} < 1")
        if self.kd_alpha < 0 or self.kd_beta < 0:
            raise ValidationError("kd_alpha and kd_beta must be >= 0")
        if self.focal_gamma < 0:
            raise ValidationError(f"focal_gamma {self.focal_gamma} < 0")
        if self.sd_lambda < 0:
            raise ValidationError(f"sd_lambda {self.sd_lambda} < 0")
        if self.svls_kernel_size % 2 != 1 or self.svls_kernel_size < 1:
            raise ValidationError("svls_kernel_size must be odd and positive")
        if self.svls_sigma <= 0:
            raise ValidationError("svls_sigma must be > 0")
        if self.class_weights is not None:
            self.class_weights = np.asarray(self.class_weights, dtype=np.float64)
            if np.any(self.class_weights < 0):
                raise ValidationError("class weights must be >= 0")


@dataclass(slots=True)
class OptimState:
    """AdamW moments and hyperparameters for one parameter tensor."""
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def init(cls, shape, **hyper) -> "OptimState":
        return cls(m=np.zeros(shape, dtype=np.float64),
                   v=np.zeros(shape, dtype=np.float64), **hyper)


@dataclass(slots=True)
class LossBreakdown:
    total: float
    terms: dict[str, float]
    grad: np.ndarray


def _flat(z: np.ndarray) -> tuple[np.ndarray, tuple]:
    """View logits as (N, K) rows; K is the channel dimension."""
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValidationError("non-finite logits")
    if z.ndim == 2:
        return z, z.shape
    if z.ndim == 3:
        k = z.shape[0]
        return z.reshape(k, -1).T, z.shape
    raise ValidationError(f"logits must be (N, K) or (K, H, W), got {z.shape}")


def _unflat(g: np.ndarray, shape: tuple) -> np.ndarray:
    if len(shape) == 2:
        return g.reshape(shape)
    k = shape[0]
    return g.T.reshape(shape)


def _targets_for(z_shape: tuple, targets: np.ndarray) -> np.ndarray | None:
    """Return soft targets as (N, K) or None when targets are hard."""
    targets = np.asarray(targets)
    if targets.shape == z_shape:
        if len(z_shape) == 2:
            return np.asarray(targets, dtype=np.float64)
        return np.asarray(targets, dtype=np.float64).reshape(z_shape[0], -1).T
    return None


def _hard_flat(z_shape: tuple, targets: np.ndarray) -> np.ndarray:
    targets = np.asarray(targets)
    expect = (z_shape[0],) if len(z_shape) == 2 else z_shape[1:]
    if targets.shape != expect:
        raise ValidationError(
            f"targets shape {targets.shape} fits neither hard {expect} "
            f"nor soft {z_shape}"
        )
    flat = targets.reshape(-1).astype(np.int64)
    k = z_shape[1] if len(z_shape) == 2 else z_shape[0]
    if flat.size and (flat.min() < 0 or flat.max() >= k):
        raise ValidationError(f"target class outside [0, {k})")
    return flat


def log_softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise log softmax over the last axis, max-subtracted."""
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax_T(z: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    if temperature <= 0:
        raise ValidationError(f"temperature {temperature} <= 0")
    return np.exp(log_softmax(np.asarray(z, dtype=np.float64) / temperature))


def _weights_vec(weights, k: int) -> np.ndarray:
    if weights is None:
        return np.ones(k, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (k,):
        raise ValidationError(f"expected {k} class weights, got shape {w.shape}")
    return w


def weighted_cross_entropy(z: np.ndarray, targets: np.ndarray,
                           weights=None) -> tuple[float, np.ndarray]:
    """Mean over pixels of -sum_k w_k t_k log p_k, with its gradient.

    Hard targets are one-hot rows t; soft targets are used as given.
    """
    zf, shape = _flat(z)
    n, k = zf.shape
    w = _weights_vec(weights, k)
    logp = log_softmax(zf)
    p = np.exp(logp)

    soft = _targets_for(shape, targets)
    if soft is None:
        y = _hard_flat(shape, targets)
        loss = float(-np.sum(w[y] * logp[np.arange(n), y]) / n)
        grad = (w[y, None] * p)
        grad[np.arange(n), y] -= w[y]
        grad /= n
    else:
        wt = soft * w[None, :]
        loss = float(-np.sum(wt * logp) / n)
        grad = (wt.sum(axis=1, keepdims=True) * p - wt) / n
    return loss, _unflat(grad, shape)


def focal_loss(z: np.ndarray, targets: np.ndarray, gamma: float = 2.0,
               class_weights=None) -> tuple[float, np.ndarray]:
    """Mean over pixels of -alpha_y (1 - p_y)^gamma log p_y.

    gamma = 0 reduces exactly to weighted_cross_entropy.  The gradient
    w.r.t. logit j is alpha_y F (p_j - [j = y]) / N with
    F = (1-p_y)^gamma - gamma p_y (1-p_y)^(gamma-1) log p_y.
    """
    if gamma < 0:
        raise ValidationError(f"gamma {gamma} < 0")
    zf, shape = _flat(z)
    n, k = zf.shape
    w = _weights_vec(class_weights, k)
    y = _hard_flat(shape, targets)
    logp = log_softmax(zf)
    p = np.exp(logp)
    rows = np.arange(n)
    pt = p[rows, y]
    logpt = logp[rows, y]
    alpha = w[y]

    u = np.clip(1.0 - pt, 0.0, 1.0)
    if gamma == 0.0:
        factor = np.ones_like(u)
        loss = float(-np.sum(alpha * logpt) / n)
    else:
        loss = float(-np.sum(alpha * u ** gamma * logpt) / n)
        # u^(gamma-1) diverges at u=0 when gamma < 1, but the whole
        # term carries log p_y which is 0 there, so zero it explicitly.
        with np.errstate(divide="ignore"):
            u_gm1 = np.where(u > 0, u ** (gamma - 1.0), 0.0)
        factor = u ** gamma - gamma * pt * np.where(u > 0, u_gm1 * logpt, 0.0)

    grad = p * (alpha * factor)[:, None]
    grad[rows, y] -= alpha * factor
    grad /= n
    return loss, _unflat(grad, shape)


def spectral_decoupling(z: np.ndarray, sd_lambda: float) -> tuple[float, np.ndarray]:
    """(lambda/2) * mean over pixels of ||z_pixel||^2; grad (lambda/N) z."""
    if sd_lambda < 0:
        raise ValidationError(f"sd_lambda {sd_lambda} < 0")
    zf, shape = _flat(z)
    n = zf.shape[0]
    penalty = float(0.5 * sd_lambda * np.sum(zf * zf) / n)
    return penalty, _unflat(sd_lambda * zf / n, shape)


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    if size % 2 != 1 or size < 1:
        raise ValidationError("kernel size must be odd and positive")
    half = size // 2
    ax = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma * sigma))
    return g / g.sum()


def svls_targets(hard: np.ndarray, n_classes: int, kernel_size: int = 3,
                 sigma: float = 1.0) -> np.ndarray:
    """Soft targets: Gaussian-weighted average of one-hot neighbor labels.

    ``n_classes`` counts every channel including background, so the
    result is (n_classes, H, W) with per-pixel sums of exactly 1 up to
    rounding.  Borders are mirrored (edge pixel not repeated).
    """
    hard = np.asarray(hard)
    if hard.ndim != 2:
        raise ValidationError("hard targets must be a 2-D class map")
    if hard.size and (hard.min() < 0 or hard.max() >= n_classes):
        raise ValidationError(f"class id outside [0, {n_classes})")
    kernel = _gaussian_kernel(kernel_size, sigma)
    out = np.empty((n_classes,) + hard.shape, dtype=np.float64)
    for c in range(n_classes):
        out[c] = ndimage.correlate((hard == c).astype(np.float64), kernel,
                                   mode="mirror")
    return out


def kd_loss(z_s: np.ndarray, z_t: np.ndarray, targets: np.ndarray,
            cfg: LossConfig) -> tuple[float, np.ndarray]:
    """alpha T^2 KL(softmax(z_t/T) || softmax(z_s/T)) + beta weighted CE.

    Both terms are means over pixels; the gradient is with respect to
    the student logits only.
    """
    zs, shape = _flat(z_s)
    zt, _ = _flat(z_t)
    if zs.shape != zt.shape:
        raise ValidationError("student and teacher logit shapes differ")
    n = zs.shape[0]
    temp = cfg.kd_temperature

    log_qs = log_softmax(zs / temp)
    log_qt = log_softmax(zt / temp)
    qt = np.exp(log_qt)
    kl = float(np.sum(qt * (log_qt - log_qs)) / n)
    kl_grad = temp * (np.exp(log_qs) - qt) / n

    ce, ce_grad = weighted_cross_entropy(z_s, targets, cfg.class_weights)
    loss = cfg.kd_alpha * temp * temp * kl + cfg.kd_beta * ce
    grad = cfg.kd_alpha * _unflat(kl_grad, shape) + cfg.kd_beta * ce_grad
    return loss, grad


def combined_seg_loss(z: np.ndarray, hard_targets: np.ndarray,
                      cfg: LossConfig) -> LossBreakdown:
    """Cross-entropy (on smoothed or hard targets) + focal + spectral
    decoupling, with per-term values and the summed gradient."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 3:
        raise ValidationError("combined loss expects (K, H, W) logits")
    k = z.shape[0]
    if cfg.use_svls:
        ce_targets = svls_targets(hard_targets, k, cfg.svls_kernel_size,
                                  cfg.svls_sigma)
    else:
        ce_targets = hard_targets
    ce, ce_grad = weighted_cross_entropy(z, ce_targets, cfg.class_weights)
    fl, fl_grad = focal_loss(z, hard_targets, cfg.focal_gamma,
                             cfg.class_weights)
    sd, sd_grad = spectral_decoupling(z, cfg.sd_lambda)
    return LossBreakdown(
        total=ce + fl + sd,
        terms={"cross_entropy": ce, "focal": fl, "spectral_decoupling": sd},
        grad=ce_grad + fl_grad + sd_grad,
    )


def adamw_step(params: np.ndarray, grads: np.ndarray,
               state: OptimState) -> tuple[np.ndarray, OptimState]:
    """One decoupled-weight-decay Adam update; returns fresh arrays."""
    p = np.asarray(params, dtype=np.float64)
    g = np.asarray(grads, dtype=np.float64)
    if p.shape != g.shape or p.shape != state.m.shape:
        raise ValidationError("param/grad/state shapes disagree")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_p = p - state.lr * (m_hat / (np.sqrt(v_hat) + state.eps)
                            + state.weight_decay * p)
    new_state = OptimState(m=m, v=v, t=t, lr=state.lr, beta1=state.beta1,
                           beta2=state.beta2, eps=state.eps,
                           weight_decay=state.weight_decay)
    return new_p, new_state


def cosine_annealing_lr(step: int, total_steps: int,
                        lr_min: float, lr_max: float) -> float:
    if total_steps <= 0:
        raise ValidationError("total_steps must be positive")
    if step < 0:
        raise ValidationError("step must be >= 0")
    if lr_min > lr_max:
        raise ValidationError("lr_min > lr_max")
    if step > total_steps:
        return lr_min
    return lr_min + 0.5 * (lr_max - lr_min) * (
        1.0 + math.cos(math.pi * step / total_steps))


def frequency_weights(counts) -> np.ndarray:
    """Inverse-frequency class weights normalized to mean 1."""
    c = np.asarray(counts, dtype=np.float64)
    if np.any(c <= 0):
        raise ValidationError("every class needs a positive count")
    w = 1.0 / c
    return w / w.mean()
