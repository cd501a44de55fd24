"""Noise schedules and the closed-form diffusion/posterior algebra.

Timesteps are 1-based throughout: valid diffusion levels are t = 1..T,
and index 0 is the clean state.  All per-step arrays are stored with
length T+1 so that t indexes them directly; entry 0 holds the clean-state
anchors (beta=0, alpha=1, alpha_bar=1, posterior variance 0), which makes
t=1 a non-special code path.

The forward marginal is
    x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps
and the exact posterior of the previous step given (x_t, x0) is Gaussian
with mean c_x0 * x0 + c_xt * x_t and variance beta_tilde:
    c_x0       = sqrt(alpha_bar_{t-1}) * beta_t / (1 - alpha_bar_t)
    c_xt       = sqrt(alpha_t) * (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)
    beta_tilde = (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * beta_t
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import raw

__all__ = [
    "NoiseSchedule",
    "make_linear_schedule",
    "q_sample",
    "posterior_coeffs",
    "posterior_step",
    "DEFAULT_T",
    "DEFAULT_BETA_START",
    "DEFAULT_BETA_END",
]

# Desk-scale defaults: T=100, linear beta in [1e-4, 0.02].
DEFAULT_T = 100
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True, eq=False)  # identity hash: instances are cache keys
class NoiseSchedule:
    """Immutable per-timestep constants; arrays are read-only, length T+1.

    ``one_minus_alpha_bars`` is not computed as 1 - alpha_bars (which loses
    low-order bits to cancellation) but by the exact recurrence
    (1-abar_t) = (1-abar_{t-1}) + abar_{t-1}*beta_t; in particular
    (1-abar_1) == beta_1 bit-exactly, which makes the t=1 posterior
    coefficients exactly (1, 0, 0).
    """

    T: int
    betas: np.ndarray                 # betas[t] for t in 1..T; betas[0] = 0
    alphas: np.ndarray                # 1 - betas
    alpha_bars: np.ndarray            # cumulative product of alphas; alpha_bars[0] = 1
    one_minus_alpha_bars: np.ndarray  # exact 1 - alpha_bars, recurrence above
    post_var: np.ndarray              # posterior variance beta_tilde; post_var[1] = 0

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside 1..{self.T}")
        return t


def make_linear_schedule(T: int = DEFAULT_T,
                         beta_start: float = DEFAULT_BETA_START,
                         beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    """Linearly spaced betas, endpoints included; derived arrays populated."""
    T = int(T)
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    betas = np.zeros(T + 1)
    betas[1:] = np.linspace(beta_start, beta_end, T)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    one_minus = np.zeros(T + 1)
    for t in range(1, T + 1):
        one_minus[t] = one_minus[t - 1] + alpha_bars[t - 1] * betas[t]
    post_var = np.zeros(T + 1)
    post_var[1:] = one_minus[:-1] / one_minus[1:] * betas[1:]
    for arr in (betas, alphas, alpha_bars, one_minus, post_var):
        arr.setflags(write=False)
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars,
                         one_minus_alpha_bars=one_minus, post_var=post_var)


def q_sample(s: NoiseSchedule, x0: np.ndarray, t: int, eps: np.ndarray) -> np.ndarray:
    """Forward marginal draw: sqrt(abar_t)*x0 + sqrt(1-abar_t)*eps."""
    t = s.check_t(t)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    return (np.sqrt(s.alpha_bars[t]) * x0
            + np.sqrt(s.one_minus_alpha_bars[t]) * eps)


def posterior_coeffs(s: NoiseSchedule, t: int) -> tuple[float, float, float]:
    """(c_x0, c_xt, var) of the previous-step posterior at timestep t.

    At t=1 this is exactly (1, 0, 0): the posterior collapses onto x0.
    """
    t = s.check_t(t)
    om_t = s.one_minus_alpha_bars[t]
    om_prev = s.one_minus_alpha_bars[t - 1]
    c_x0 = np.sqrt(s.alpha_bars[t - 1]) * s.betas[t] / om_t
    c_xt = np.sqrt(s.alphas[t]) * om_prev / om_t
    return float(c_x0), float(c_xt), float(s.post_var[t])


def posterior_step(s: NoiseSchedule, x0, xt, t: int, eps=None):
    """One reverse step t -> t-1 from the exact posterior.

    Returns the posterior mean when ``eps`` is None (deterministic mode),
    otherwise mean + sqrt(var) * eps.  ``x0`` and ``xt`` may be plain
    arrays or autodiff ``Var`` values; ``eps`` is always a constant.
    """
    t = s.check_t(t)
    if raw(x0).shape != raw(xt).shape:
        raise ValueError(f"x0 shape {raw(x0).shape} != xt shape {raw(xt).shape}")
    c_x0, c_xt, var = posterior_coeffs(s, t)
    mean = c_x0 * x0 + c_xt * xt
    if eps is None:
        return mean
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != raw(xt).shape:
        raise ValueError(f"eps shape {eps.shape} != state shape {raw(xt).shape}")
    return mean + np.sqrt(var) * eps
