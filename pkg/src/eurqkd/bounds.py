"""Smooth min-/max-entropy bounds from the entropic uncertainty relation.

Distances are measured on bin indices, so ``d0``, ``mu`` and the argument of
the large-deviation function are all in bin units.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import mathfn
from .channel import noise_variance
from .params import DOUBLE, SINGLE, ChannelModel, Discretization, ProtocolParams, SecurityBudget


class BudgetExhausted(ValueError):
    """The smoothing parameter is not positive: alpha too small or n too large."""


@dataclass(frozen=True)
class SmoothingReport:
    eps_prime: float
    p_alpha: float
    p_pass: float


@dataclass(frozen=True)
class MaxEntropyInput:
    """Inputs of the max-entropy bound.

    Attributes
    ----------
    d0 : float
        Distance threshold in bins. In double mode this is the total
        ``d(M2, B) + d(M1, M2)``.
    mu : float
        Statistical fluctuation in bins; zero in double mode.
    n_key : int
        Number of key signals (``n`` in single mode, ``N`` in double mode).
    mode : str
    literal_double : bool
        Use ``N * log2(d)`` without the large-deviation function in double
        mode. Off by default; kept for reproduction studies only.
    """

    d0: float
    mu: float = 0.0
    n_key: int = 1
    mode: str = SINGLE
    literal_double: bool = False

    def __post_init__(self):
        if self.d0 < 0 or self.mu < 0:
            raise ValueError("d0 and mu must be >= 0")
        if self.n_key < 1:
            raise ValueError("n_key must be >= 1")


def eps_prime(sec: SecurityBudget, p_alpha: float, n_key: int) -> SmoothingReport:
    """Smoothing parameter of the max-entropy after the out-of-range penalty.

    ``eps' = eps_s / (4 p_pass) - 2 sqrt(2 [1 - (1 - p_alpha)^n]) / sqrt(p_pass)``

    Raises
    ------
    BudgetExhausted
        If ``eps' <= 0``.
    """
    if not 0.0 <= p_alpha < 1.0:
        raise ValueError(f"p_alpha must be in [0, 1), got {p_alpha}")
    if n_key < 1:
        raise ValueError(f"n_key must be >= 1, got {n_key}")
    p_pass = sec.p_pass
    # 1 - (1 - p)^n without cancellation, valid down to p ~ 1e-300
    p_any = -math.expm1(n_key * math.log1p(-p_alpha))
    value = sec.eps_s / (4.0 * p_pass) - 2.0 * math.sqrt(2.0 * p_any) / math.sqrt(p_pass)
    if not value > 0:
        raise BudgetExhausted(
            f"security budget exhausted: eps' = {value:.3g} <= 0 "
            f"(p_alpha={p_alpha:.3g}, n={n_key}); increase alpha or eps_s"
        )
    return SmoothingReport(eps_prime=value, p_alpha=p_alpha, p_pass=p_pass)


def mu_fluctuation(disc: Discretization, n_total: int, m_pe: int, eps_prime: float) -> float:
    """Sampling fluctuation of the PE distance, in bins.

    ``mu = (2 alpha / delta) sqrt(N (m + 1) / (n m^2) ln(1/eps'))`` with ``n = N - m``.
    """
    if not 0 < m_pe < n_total:
        raise ValueError(f"need 0 < m_pe < n_total, got m_pe={m_pe}, n_total={n_total}")
    if not 0 < eps_prime < 1:
        raise ValueError(f"eps_prime must be in (0, 1), got {eps_prime}")
    n = n_total - m_pe
    return disc.n_bins * math.sqrt(
        n_total * (m_pe + 1.0) / (n * float(m_pe) ** 2) * math.log(1.0 / eps_prime)
    )


def hmax_bound(inp: MaxEntropyInput) -> float:
    """Upper bound on the smooth max-entropy in bits."""
    t = inp.d0 + (inp.mu if inp.mode == SINGLE else 0.0)
    if inp.mode == DOUBLE and inp.literal_double:
        return inp.n_key * math.log2(t) if t > 0 else -math.inf
    return inp.n_key * mathfn.log2_gamma_ldf(t)


def hmin_bound(n_key: int, disc: Discretization, hmax: float,
               use_prolate_correction: bool = False) -> float:
    """Lower bound ``-n log2 c(delta) - H_max`` on the smooth min-entropy."""
    if n_key == 0:
        return 0.0
    c = mathfn.overlap_c(mathfn.OverlapParams(disc.delta, use_prolate_correction))
    return -n_key * math.log2(c) - hmax


def l1_distance(a, b) -> float:
    """Mean absolute difference of two equal-length integer sequences."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("empty sequences")
    diff = np.abs(a.astype(np.int64) - b.astype(np.int64))
    # integer sum is exact and independent of summation order
    return float(int(diff.sum())) / a.size


def predicted_d0(params: ProtocolParams, ch: ChannelModel, disc: Discretization,
                 rescale: bool = True, method: str = "exact") -> float:
    """Model-side expected distance between Alice's and Bob's binned data.

    Alice's values are multiplied by ``sqrt(tau)`` before binning when
    ``rescale`` is set. In double mode the return value is the total
    ``d(M2, B) + d(M1, M2)`` that enters the max-entropy bound.

    ``method`` is ``"exact"`` (joint Gaussian integrated over the bin grid,
    see :func:`eurqkd.mathfn.expected_bin_distance`), ``"smooth"``
    (``E|D| / delta``, the fine-bin limit) or ``"approx"``
    (``E|D| / delta + 1`` per distance, conservative).
    """
    r = math.sqrt(ch.tau) if rescale else 1.0
    v_n = noise_variance(params, ch)
    sq = math.sqrt(ch.tau)
    if params.mode == DOUBLE:
        # (M2, B): B carries sqrt(tau) M1 as noise; (M1, M2): independent
        terms = [
            (r * r * params.v_m2, sq / r, ch.tau * params.v_m1 + v_n),
            (r * r * params.v_m1, 0.0, r * r * params.v_m2),
        ]
    else:
        terms = [(r * r * params.v_m, sq / r, v_n)]
    return sum(_pair_distance(va, s, vc, disc.alpha, disc.bits, method) for va, s, vc in terms)


@lru_cache(maxsize=4096)
def _pair_distance(var_a, slope, cond_var, alpha, bits, method):
    delta = 2.0 * alpha / 2**bits
    if method == "exact":
        return mathfn.expected_bin_distance(var_a, slope, cond_var, alpha, delta)
    # D = b - a has variance (slope - 1)^2 var_a + cond_var
    v_d = (slope - 1.0) ** 2 * var_a + cond_var
    d = mathfn.expected_abs_gaussian(v_d) / delta
    if method == "smooth":
        return d
    if method == "approx":
        return d + 1.0
    raise ValueError(f"unknown method {method!r}")
