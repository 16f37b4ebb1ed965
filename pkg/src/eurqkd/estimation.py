"""Maximum-likelihood channel estimators and one-sided confidence bounds.

Single mode estimates from ``m`` revealed pairs ``(M_i, B_i)``. Double mode
estimates from all ``N`` pairs ``(M2_i, B_i)``; the secret modulation ``M1``
then acts as additional source noise of variance ``V_M1``.

Variances use the plug-in estimates in place of the true parameters.
Confidence bounds take ``z`` standard deviations (6.5 by default, paired with
a failure probability of 1e-10).
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from dataclasses import dataclass

import numpy as np

from .channel import noise_variance
from .params import DOUBLE, ChannelModel, ProtocolParams, SecurityBudget


@dataclass(frozen=True)
class EstimationReport:
    c_mb_hat: float
    tau_hat: float
    sigma_tau: float
    tau_low: float
    v_eps_hat: float
    sigma_veps: float
    v_eps_up: float
    m_used: int
    mode: str
    z: float
    tau_low_clamped: bool = False
    v_eps_up_clamped: bool = False
    negative_v_eps: bool = False
    degenerate: bool = False

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def fields(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    def to_csv_row(self) -> str:
        return ",".join(_fmt(getattr(self, k)) for k in self.fields()) + "\n"

    def to_csv(self) -> str:
        return ",".join(self.fields()) + "\n" + self.to_csv_row()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return f"{v:.17e}"
    return str(v)


def _pair(m_data, b_data):
    m = np.asarray(m_data, dtype=float)
    b = np.asarray(b_data, dtype=float)
    if m.shape != b.shape:
        raise ValueError(f"length mismatch: {m.shape} vs {b.shape}")
    if m.size < 2:
        raise ValueError(f"need at least 2 samples, got {m.size}")
    return m, b


def estimate_covariance(m_data, b_data) -> float:
    """``c_MB = (1/m) sum M_i B_i``."""
    m, b = _pair(m_data, b_data)
    # numpy's pairwise summation is deterministic for a fixed array length
    return float(np.sum(m * b) / m.size)


def estimate_tau(c_mb_hat: float, v_m: float) -> float:
    """``tau = c_MB^2 / V_M^2``."""
    if not v_m > 0:
        raise ValueError(f"v_m must be positive, got {v_m}")
    return c_mb_hat * c_mb_hat / (v_m * v_m)


def _tau_var(tau: float, v_n: float, v_sig: float, m: int) -> float:
    # (4 tau^2 / m)(2 + V_N / (tau V)) written without dividing by tau
    return (8.0 * tau * tau + 4.0 * tau * v_n / v_sig) / m


def tau_variance(tau: float, params: ProtocolParams, ch: ChannelModel, m: int,
                 mode: str | None = None) -> float:
    """Variance of the transmittance estimator.

    Single mode: ``(4 tau^2 / m)(2 + V_N / (tau V_M))``.
    Double mode: ``(4 tau^2 / N)(2 + V_N* / (tau V_M2))``; pass ``m = N``.
    ``tau`` is used for the prefactor and ``ch`` for the noise variance.
    """
    mode = mode or params.mode
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    v_n = _residual_variance(params, ch, mode)
    v_sig = params.v_m2 if mode == DOUBLE else params.v_m
    return _tau_var(tau, v_n, v_sig, m)


def _residual_variance(params, ch, mode):
    v_n = noise_variance(params, ch)
    if mode == DOUBLE:
        v_n += ch.tau * params.v_m1
    return v_n


def tau_lower_bound(tau_hat: float, sigma_tau: float, z: float) -> tuple[float, bool]:
    """``tau_hat - z sigma``, clamped at zero. Returns ``(bound, clamped)``."""
    if sigma_tau < 0:
        raise ValueError("sigma_tau must be >= 0")
    low = tau_hat - z * sigma_tau
    if low < 0:
        return 0.0, True
    return low, False


def estimate_excess(m_data, b_data, tau_hat: float, v_s: float, v_m1: float = 0.0) -> float:
    """Excess-noise variance estimator.

    ``(1/m) sum (B_i - sqrt(tau) M_i)^2 + tau (1 - V_S) - 1``; in double mode
    ``M`` is the revealed modulation and ``tau * V_M1`` is also removed from
    the residual. The value can be negative and is returned unclamped.
    """
    m, b = _pair(m_data, b_data)
    if tau_hat < 0:
        raise ValueError("tau_hat must be >= 0")
    r = b - math.sqrt(tau_hat) * m
    return float(np.sum(r * r) / m.size) + tau_hat * (1.0 - v_s - v_m1) - 1.0


def excess_variance(params: ProtocolParams, ch: ChannelModel, m: int,
                    mode: str | None = None, sigma_tau2: float | None = None) -> float:
    """Variance of the excess-noise estimator.

    Single mode: ``(2/m) V_N^2 + sigma_tau^2 (1 - V_S)^2``.
    Double mode: ``(2/N) V_N*^2 + sigma_tau*^2 (1 - V_S - V_M1)^2``. The
    ``V_M1`` term comes from removing ``tau * V_M1`` in :func:`estimate_excess`
    and vanishes when ``V_M1 = 0``.
    """
    mode = mode or params.mode
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    v_n = _residual_variance(params, ch, mode)
    if sigma_tau2 is None:
        sigma_tau2 = tau_variance(ch.tau, params, ch, m, mode)
    coef = 1.0 - params.v_s - (params.v_m1 if mode == DOUBLE else 0.0)
    return 2.0 * v_n * v_n / m + sigma_tau2 * coef * coef


def excess_upper_bound(v_eps_hat: float, sigma_veps: float, z: float) -> tuple[float, bool]:
    """``V_eps + z sigma``, clamped below at zero. Returns ``(bound, clamped)``."""
    if sigma_veps < 0:
        raise ValueError("sigma_veps must be >= 0")
    up = v_eps_hat + z * sigma_veps
    if up < 0:
        return 0.0, True
    return up, False


def _assemble(c_mb, tau_hat, v_eps_hat, params, m_used, z, mode, degenerate=False):
    # plug-in estimates stand in for the true parameters in the variances
    tau_pi = min(max(tau_hat, 0.0), 1.0)
    v_m1 = params.v_m1 if mode == DOUBLE else 0.0
    v_sig = params.v_m2 if mode == DOUBLE else params.v_m
    v_n = max(1.0 + v_eps_hat + tau_pi * (params.v_s + v_m1 - 1.0), 0.0)
    v_tau = _tau_var(tau_pi, v_n, v_sig, m_used)
    coef = 1.0 - params.v_s - v_m1
    v_eps = 2.0 * v_n * v_n / m_used + v_tau * coef * coef
    sigma_tau = math.sqrt(v_tau)
    sigma_veps = math.sqrt(v_eps)
    tau_low, t_clamp = tau_lower_bound(tau_hat, sigma_tau, z)
    v_up, v_clamp = excess_upper_bound(v_eps_hat, sigma_veps, z)
    return EstimationReport(
        c_mb_hat=float(c_mb), tau_hat=float(tau_hat), sigma_tau=sigma_tau, tau_low=tau_low,
        v_eps_hat=float(v_eps_hat), sigma_veps=sigma_veps, v_eps_up=v_up,
        m_used=int(m_used), mode=mode, z=float(z),
        tau_low_clamped=t_clamp, v_eps_up_clamped=v_clamp,
        negative_v_eps=v_eps_hat < 0, degenerate=degenerate,
    )


def run_estimation(batch, params: ProtocolParams, sec: SecurityBudget,
                   z: float | None = None) -> EstimationReport:
    """Estimate the channel from a data block.

    ``batch`` is a :class:`eurqkd.channel.Batch` (or any object with ``m``/
    ``m2`` and ``b`` arrays). Single mode uses all pairs it is given, which
    should be the ``m_pe`` revealed ones; double mode uses ``(m2, b)``.
    """
    z = sec.z_pe if z is None else z
    mode = params.mode
    if mode == DOUBLE:
        m_data, v_sig, v_m1 = batch.m2, params.v_m2, params.v_m1
    else:
        m_data, v_sig, v_m1 = batch.m, params.v_m, 0.0
    if m_data is None:
        raise ValueError(f"batch does not hold {mode}-mode data")
    m, b = _pair(m_data, batch.b)
    c_mb = estimate_covariance(m, b)
    tau_hat = estimate_tau(c_mb, v_sig)
    v_eps_hat = estimate_excess(m, b, tau_hat, params.v_s, v_m1)
    degenerate = tau_hat == 0.0
    return _assemble(c_mb, tau_hat, v_eps_hat, params, m.size, z, mode, degenerate)


def expected_estimation(params: ProtocolParams, ch: ChannelModel, sec: SecurityBudget,
                        z: float | None = None) -> EstimationReport:
    """Report an estimation would give on average: true point values, model variances."""
    z = sec.z_pe if z is None else z
    m = params.m_estimation
    v_sig = params.v_pe
    return _assemble(math.sqrt(ch.tau) * v_sig, ch.tau, ch.v_eps, params, m, z, params.mode)


def reports_to_csv(reports) -> str:
    out = io.StringIO()
    out.write(",".join(EstimationReport.fields()) + "\n")
    for r in reports:
        out.write(r.to_csv_row())
    return out.getvalue()


def report_from_csv(text: str) -> list[EstimationReport]:
    rows = list(csv.DictReader(io.StringIO(text)))
    out = []
    for row in rows:
        kw = {}
        for f in dataclasses.fields(EstimationReport):
            v = row[f.name]
            if f.type in ("bool",):
                kw[f.name] = v == "1"
            elif f.type in ("int",):
                kw[f.name] = int(v)
            elif f.type in ("str",):
                kw[f.name] = v
            else:
                kw[f.name] = float(v)
        out.append(EstimationReport(**kw))
    return out
