"""Covariance kernels of the system-noise process and their parameter derivatives.

Two kernels are supported: the integrated Ornstein-Uhlenbeck kernel
(parameters alpha > 0, tau > 0) and the scaled fractional Brownian motion
kernel (parameters hurst in (0,1), tau > 0). All functions broadcast over
numpy arrays of times and are pure.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "iou_kernel",
    "iou_kernel_dalpha",
    "iou_kernel_dtau",
    "iou_kernel_d2alpha",
    "iou_kernel_dalpha_dtau",
    "iou_kernel_d2tau",
    "fbm_kernel",
    "fbm_kernel_dhurst",
    "fbm_kernel_dtau",
    "fbm_kernel_d2hurst",
    "fbm_kernel_dhurst_dtau",
    "fbm_kernel_d2tau",
]

# Below alpha*max(s,t) = 1e-4 the closed form cancels to O(alpha^3) and loses
# ~8 significant digits; a series in alpha is used instead.
_SERIES_THRESHOLD = 1e-4


def _check_times(s, t):
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(t))):
        raise ValueError("non-finite time input")
    if np.any(s < 0) or np.any(t < 0):
        raise ValueError("times must be nonnegative")
    return s, t


def _check_positive(name, value) -> float:
    value = float(value)
    if not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be positive and finite, got {value}")
    return value


def _maybe_scalar(arr, scalar_in):
    return float(arr) if scalar_in else arr


def _iou_series(alpha, t2, m, big, order):
    st = m * big
    m2 = m * m
    b2 = big * big
    c3 = m * (2.0 * m2 - 3.0 * m * big + 3.0 * b2)
    p4 = 2.0 * m2 - 3.0 * st + 2.0 * b2
    c5 = m * (2.0 * m2 * m2 - 5.0 * m2 * m * big + 10.0 * m2 * b2 - 10.0 * m * b2 * big + 5.0 * b2 * b2)
    if order == 0:
        return t2 * (st / (2.0 * alpha) - c3 / 12.0 + alpha * st * p4 / 24.0 - alpha * alpha * c5 / 240.0)
    if order == 1:
        return t2 * (-st / (2.0 * alpha * alpha) + st * p4 / 24.0 - alpha * c5 / 120.0)
    return t2 * (st / alpha**3 - c5 / 120.0)


def _iou_eval(alpha, tau, s, t, order):
    """Shared dispatcher: order 0 kernel, 1 d/dalpha, 2 d2/dalpha2."""
    scalar_in = np.isscalar(s) and np.isscalar(t)
    alpha = _check_positive("alpha", alpha)
    tau = _check_positive("tau", tau)
    s, t = _check_times(s, t)
    t2 = tau * tau

    # evaluate in (min, max) order so K(s, t) == K(t, s) exactly
    m = np.minimum(s, t)
    big = np.maximum(s, t)
    d = big - m
    em = np.exp(-alpha * m)
    eb = np.exp(-alpha * big)
    ed = np.exp(-alpha * d)
    u0 = 2.0 * alpha * m + em + eb - 1.0 - ed
    if order == 0:
        out = t2 / (2.0 * alpha**3) * u0
    else:
        u1 = 2.0 * m - m * em - big * eb + d * ed
        if order == 1:
            out = t2 / (2.0 * alpha**4) * (-3.0 * u0 + alpha * u1)
        else:
            u2 = m * m * em + big * big * eb - d * d * ed
            out = t2 / (2.0 * alpha**5) * (12.0 * u0 - 6.0 * alpha * u1 + alpha * alpha * u2)

    # the closed form cancels catastrophically for small alpha; series there
    mask = alpha * big < _SERIES_THRESHOLD
    if np.any(mask):
        series = _iou_series(alpha, t2, m, big, order)
        out = np.where(mask, series, out)
    # the process starts at zero, so rows with min(s, t) = 0 vanish identically
    out = np.where(m == 0.0, 0.0, out)
    return _maybe_scalar(out, scalar_in)


def iou_kernel(alpha, tau, s, t):
    """Covariance of the integrated stationary OU process at times (s, t).

    Equals tau^2/(2 alpha^3) * (2 alpha min(s,t) + e^(-alpha s)
    + e^(-alpha t) - 1 - e^(-alpha |s-t|)); symmetric in (s, t), zero
    whenever s or t is zero.
    """
    return _iou_eval(alpha, tau, s, t, order=0)


def iou_kernel_dalpha(alpha, tau, s, t):
    """Partial derivative of iou_kernel with respect to alpha."""
    return _iou_eval(alpha, tau, s, t, order=1)


def iou_kernel_dtau(alpha, tau, s, t):
    """Partial derivative of iou_kernel with respect to tau (= 2K/tau)."""
    return (2.0 / float(tau)) * np.asarray(_iou_eval(alpha, tau, s, t, order=0))


def iou_kernel_d2alpha(alpha, tau, s, t):
    """Second partial derivative of iou_kernel with respect to alpha."""
    return _iou_eval(alpha, tau, s, t, order=2)


def iou_kernel_dalpha_dtau(alpha, tau, s, t):
    """Mixed second partial derivative in (alpha, tau)."""
    return (2.0 / float(tau)) * np.asarray(_iou_eval(alpha, tau, s, t, order=1))


def iou_kernel_d2tau(alpha, tau, s, t):
    """Second partial derivative of iou_kernel with respect to tau (= 2K/tau^2)."""
    return (2.0 / float(tau) ** 2) * np.asarray(_iou_eval(alpha, tau, s, t, order=0))


def _pow_log(x, exponent, log_power):
    """x**exponent * log(x)**log_power with the x=0 limit defined as 0."""
    x = np.asarray(x, dtype=float)
    pos = x > 0
    safe = np.where(pos, x, 1.0)
    val = safe**exponent
    if log_power:
        val = val * np.log(safe) ** log_power
    return np.where(pos, val, 0.0)


def _fbm_eval(hurst, tau, s, t, dh_order):
    scalar_in = np.isscalar(s) and np.isscalar(t)
    hurst = float(hurst)
    if not np.isfinite(hurst) or not (0.0 < hurst < 1.0):
        raise ValueError(f"hurst must lie in (0, 1), got {hurst}")
    tau = _check_positive("tau", tau)
    s, t = _check_times(s, t)
    d = np.abs(s - t)
    h2 = 2.0 * hurst
    g = _pow_log(s, h2, dh_order) + _pow_log(t, h2, dh_order) - _pow_log(d, h2, dh_order)
    return g, tau, scalar_in


def fbm_kernel(hurst, tau, s, t):
    """Scaled fractional Brownian motion covariance.

    tau^2/2 * (s^(2H) + t^(2H) - |s-t|^(2H)); at H = 1/2 this is the
    scaled Wiener covariance tau^2 min(s, t).
    """
    g, tau, scalar_in = _fbm_eval(hurst, tau, s, t, dh_order=0)
    return _maybe_scalar(tau * tau / 2.0 * g, scalar_in)


def fbm_kernel_dhurst(hurst, tau, s, t):
    """Partial derivative with respect to the Hurst parameter.

    Each x^(2H) log x term is defined as 0 at x = 0 (the analytic limit),
    which removes the tie singularity at s = t.
    """
    g, tau, scalar_in = _fbm_eval(hurst, tau, s, t, dh_order=1)
    return _maybe_scalar(tau * tau * g, scalar_in)


def fbm_kernel_dtau(hurst, tau, s, t):
    """Partial derivative with respect to tau (= 2K/tau)."""
    g, tau, scalar_in = _fbm_eval(hurst, tau, s, t, dh_order=0)
    return _maybe_scalar(tau * g, scalar_in)


def fbm_kernel_d2hurst(hurst, tau, s, t):
    """Second partial derivative with respect to the Hurst parameter."""
    g, tau, scalar_in = _fbm_eval(hurst, tau, s, t, dh_order=2)
    return _maybe_scalar(2.0 * tau * tau * g, scalar_in)


def fbm_kernel_dhurst_dtau(hurst, tau, s, t):
    """Mixed second partial derivative in (hurst, tau)."""
    g, tau, scalar_in = _fbm_eval(hurst, tau, s, t, dh_order=1)
    return _maybe_scalar(2.0 * tau * g, scalar_in)


def fbm_kernel_d2tau(hurst, tau, s, t):
    """Second partial derivative with respect to tau (= 2K/tau^2)."""
    g, tau, scalar_in = _fbm_eval(hurst, tau, s, t, dh_order=0)
    return _maybe_scalar(g, scalar_in)
