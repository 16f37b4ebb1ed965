"""Finite-size key length, key rate, sweeps and a grid-search optimizer.

The key length is

    ell = H_min - leak_EC - log2(1 / (eps_1^2 eps_c)) + 2

with ``H_min`` from the uncertainty relation, ``H_max`` driven by the
expected distance between the two parties' binned data, and the error
correction leakage ``H(x) - beta * I(A:B)`` per key symbol. Finite-size
channel knowledge only changes the mutual information, which is evaluated at
the pessimistic confidence bounds ``(tau_low, V_eps_up)``.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import optimize as sp_optimize

from . import bounds, mathfn
from .channel import bob_variance, noise_variance
from .estimation import EstimationReport, expected_estimation
from .params import (
    DOUBLE,
    DR,
    RR,
    SINGLE,
    ChannelModel,
    Discretization,
    ProtocolParams,
    SecurityBudget,
    validate,
)

IDEAL, FINITE = "ideal", "finite"

ABORT_BUDGET = "budget_exhausted"
ABORT_NEGATIVE = "negative_key"
ABORT_INVALID = "invalid_configuration"


@dataclass(frozen=True)
class KeyRateReport:
    """Every input and intermediate quantity of one key-length evaluation.

    Bits are totals over the block except ``entropy_ref`` and
    ``mutual_info``, which are per key symbol. ``rate`` is in bits per
    channel use, ``max(ell_low, 0) / n_total``. A non-empty
    ``abort_reason`` means the rate was set to zero.
    """

    # inputs
    distance_km: float
    tau: float
    excess_noise: float
    loss_db_per_km: float
    mode: str
    direction: str
    estimation: str
    n_total: int
    n_key: int
    m_pe: int | None
    v_s: float
    v_anti: float
    v_m: float
    v_m1: float | None
    v_m2: float | None
    beta: float
    alpha: float
    bits: int
    delta: float
    eps_c: float
    eps_s: float
    eps_1: float
    p_pass: float
    z_pe: float
    # channel knowledge used for the leakage
    tau_used: float
    v_eps_used: float
    # bounds
    overlap_c: float
    d0: float
    mu: float
    p_alpha: float
    eps_prime: float
    h_max: float
    h_min: float
    entropy_ref: float
    mutual_info: float
    leak_ec: float
    correction: float
    ell_low: float
    rate: float
    abort_reason: str = ""

    @classmethod
    def fields(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv_row(self) -> str:
        return ",".join(_fmt(getattr(self, k)) for k in self.fields()) + "\n"

    @property
    def positive(self) -> bool:
        return self.rate > 0


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return f"{v:.17e}"
    return str(v)


def reports_to_csv(reports: Sequence[KeyRateReport]) -> str:
    """Header plus one row per report, numbers in full precision."""
    out = io.StringIO()
    out.write(",".join(KeyRateReport.fields()) + "\n")
    for r in reports:
        out.write(r.to_csv_row())
    return out.getvalue()


def write_reports_csv(reports: Sequence[KeyRateReport], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(reports_to_csv(reports))


def read_reports_csv(path: str | Path) -> list[dict]:
    """Rows of a key-rate CSV as dictionaries of strings."""
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# leakage


def _noise_at(params: ProtocolParams, tau: float, v_eps: float) -> float:
    return 1.0 + v_eps + tau * (params.v_s - 1.0)


def mutual_information(params: ProtocolParams, ch: ChannelModel,
                       tau: float | None = None, v_eps: float | None = None) -> float:
    """Shannon information ``1/2 log2(1 + tau V / V_N)`` per symbol.

    ``V`` is the key-bearing modulation (``V_M``, or ``V_M1`` in double
    mode, where the revealed part is known to both sides). ``tau`` and
    ``v_eps`` override the channel, e.g. with confidence bounds.
    """
    tau = ch.tau if tau is None else tau
    v_eps = ch.v_eps if v_eps is None else v_eps
    if tau <= 0:
        return 0.0
    v_n = _noise_at(params, tau, v_eps)
    if not v_n > 0:
        raise ValueError(f"noise variance must be positive, got {v_n}")
    return 0.5 * math.log2(1.0 + tau * params.v_key / v_n)


def reference_variance(params: ProtocolParams, ch: ChannelModel, direction: str | None = None) -> float:
    """Variance of the data the reconciliation is referenced to.

    Direct reconciliation uses Alice's key modulation; reverse
    reconciliation uses Bob's outcome. In double mode Bob removes the
    revealed component, leaving ``tau V_M1 + V_N``.
    """
    direction = direction or params.direction
    if direction == DR:
        return params.v_key
    if direction == RR:
        if params.mode == DOUBLE:
            return ch.tau * params.v_m1 + noise_variance(params, ch)
        return bob_variance(params, ch)
    raise ValueError(f"direction must be 'dr' or 'rr', got {direction!r}")


def leakage_per_symbol(params: ProtocolParams, ch: ChannelModel, disc: Discretization,
                       direction: str | None = None,
                       est: EstimationReport | None = None) -> tuple[float, float, float]:
    """``(leak, H, I)`` per key symbol; ``I`` uses the bounds in ``est`` if given."""
    h = mathfn.discrete_gaussian_entropy(reference_variance(params, ch, direction),
                                         disc.alpha, disc.delta)
    tau, v_eps = _channel_knowledge(ch, est)
    i_ab = mutual_information(params, ch, tau, v_eps)
    return h - params.beta * i_ab, h, i_ab


def leakage(params: ProtocolParams, ch: ChannelModel, disc: Discretization,
            direction: str | None = None, est: EstimationReport | None = None) -> float:
    """Error-correction leakage in bits over the ``n_key`` key symbols."""
    per, _, _ = leakage_per_symbol(params, ch, disc, direction, est)
    return per * params.n_key


def _channel_knowledge(ch, est):
    if est is None:
        return ch.tau, ch.v_eps
    return est.tau_low, est.v_eps_up


# ---------------------------------------------------------------------------
# key length


def security_correction(sec: SecurityBudget) -> float:
    """``log2(1 / (eps_1^2 eps_c)) - 2``, subtracted from ``H_min - leak``."""
    return -2.0 * math.log2(sec.eps_1) - math.log2(sec.eps_c) - 2.0


def key_length(
    params: ProtocolParams,
    ch: ChannelModel,
    disc: Discretization,
    sec: SecurityBudget,
    est: EstimationReport | None = None,
    *,
    rescale: bool = True,
    margin: float = 1.0,
    literal_double: bool = False,
    d0_method: str = "exact",
    use_prolate_correction: bool = False,
) -> KeyRateReport:
    """Evaluate the key length for one configuration.

    Parameters
    ----------
    est : EstimationReport, optional
        Finite-size channel knowledge. Without it the true channel enters
        the mutual information (ideal estimation).
    rescale : bool
        Scale Alice's data by ``sqrt(tau)`` before binning it for the
        distance.
    margin : float
        Multiplies the predicted distance threshold ``d0``.
    literal_double : bool
        Double mode only: use ``N log2 d`` in place of ``N log2 gamma(d)``.
        The result is clamped at zero bits.
    d0_method : str
        Passed to :func:`eurqkd.bounds.predicted_d0`.

    A configuration whose smoothing budget is exhausted gets rate zero and
    ``abort_reason == "budget_exhausted"`` rather than an exception.
    """
    if margin <= 0:
        raise ValueError(f"margin must be positive, got {margin}")
    n_key = params.n_key
    c = mathfn.overlap_c(mathfn.OverlapParams(disc.delta, use_prolate_correction))
    p_alpha = mathfn.gaussian_tail(disc.alpha, bob_variance(params, ch))
    tau_used, v_eps_used = _channel_knowledge(ch, est)
    leak_per, h_ref, i_ab = leakage_per_symbol(params, ch, disc, None, est)
    leak = leak_per * n_key
    corr = security_correction(sec)
    d0 = margin * bounds.predicted_d0(params, ch, disc, rescale=rescale, method=d0_method)
    common = _snapshot(params, ch, disc, sec, est)
    common.update(
        tau_used=tau_used, v_eps_used=v_eps_used, overlap_c=c, d0=d0,
        p_alpha=p_alpha, entropy_ref=h_ref, mutual_info=i_ab, leak_ec=leak, correction=corr,
    )
    try:
        smooth = bounds.eps_prime(sec, p_alpha, n_key)
    except bounds.BudgetExhausted:
        return KeyRateReport(
            mu=math.nan, eps_prime=math.nan, h_max=math.nan, h_min=math.nan,
            ell_low=-math.inf, rate=0.0, abort_reason=ABORT_BUDGET, **common,
        )
    if params.mode == SINGLE:
        mu = bounds.mu_fluctuation(disc, params.n_total, params.m_pe, smooth.eps_prime)
    else:
        mu = 0.0
    inp = bounds.MaxEntropyInput(d0=d0, mu=mu, n_key=n_key, mode=params.mode,
                                 literal_double=literal_double)
    h_max = max(bounds.hmax_bound(inp), 0.0)
    h_min = -n_key * math.log2(c) - h_max
    ell = h_min - leak - corr
    rate = max(ell, 0.0) / params.n_total
    return KeyRateReport(
        mu=mu, eps_prime=smooth.eps_prime, h_max=h_max, h_min=h_min,
        ell_low=ell, rate=rate, abort_reason="" if ell > 0 else ABORT_NEGATIVE, **common,
    )


def _snapshot(params, ch, disc, sec, est):
    return dict(
        distance_km=ch.distance_km,
        tau=ch.tau,
        excess_noise=ch.excess_noise,
        loss_db_per_km=ch.loss_db_per_km,
        mode=params.mode,
        direction=params.direction,
        estimation=IDEAL if est is None else FINITE,
        n_total=params.n_total,
        n_key=params.n_key,
        m_pe=params.m_pe if params.mode == SINGLE else None,
        v_s=params.v_s,
        v_anti=params.v_anti,
        v_m=params.v_m,
        v_m1=params.v_m1 if params.mode == DOUBLE else None,
        v_m2=params.v_m2 if params.mode == DOUBLE else None,
        beta=params.beta,
        alpha=disc.alpha,
        bits=int(disc.bits),
        delta=disc.delta,
        eps_c=sec.eps_c,
        eps_s=sec.eps_s,
        eps_1=sec.eps_1,
        p_pass=sec.p_pass,
        z_pe=sec.z_pe,
    )


def evaluate(params: ProtocolParams, ch: ChannelModel, disc: Discretization,
             sec: SecurityBudget, estimation: str = FINITE, **kw) -> KeyRateReport:
    """:func:`key_length` with the expected finite-size estimate, or ideal knowledge."""
    if estimation == FINITE:
        est = expected_estimation(params, ch, sec)
    elif estimation == IDEAL:
        est = None
    else:
        raise ValueError(f"estimation must be 'ideal' or 'finite', got {estimation!r}")
    return key_length(params, ch, disc, sec, est, **kw)


# ---------------------------------------------------------------------------
# asymptotic limit


def asymptotic_rate(params: ProtocolParams, ch: ChannelModel, disc: Discretization, *,
                    rescale: bool = True, d0_method: str = "exact",
                    literal_double: bool = False) -> float:
    """Bits per symbol for an infinite block (no fluctuation, no budget terms).

    Returned unclamped so that the sign marks the cutoff.
    """
    c = mathfn.overlap_c(mathfn.OverlapParams(disc.delta))
    d0 = bounds.predicted_d0(params, ch, disc, rescale=rescale, method=d0_method)
    if params.mode == DOUBLE and literal_double:
        hmax = max(math.log2(d0), 0.0) if d0 > 0 else 0.0
    else:
        hmax = mathfn.log2_gamma_ldf(d0)
    leak, _, _ = leakage_per_symbol(params, ch, disc)
    return -math.log2(c) - hmax - leak


def cutoff_distance(params: ProtocolParams, disc: Discretization, *,
                    excess_noise: float = 0.01, loss_db_per_km: float = 0.2,
                    max_km: float = 300.0, step_km: float = 0.25, **kw) -> float:
    """Largest distance with a positive asymptotic rate (0 if none)."""
    def f(d):
        return asymptotic_rate(params, ChannelModel.from_distance(d, excess_noise, loss_db_per_km),
                               disc, **kw)

    grid = np.arange(0.0, max_km + step_km / 2, step_km)
    vals = [f(d) for d in grid]
    if vals[0] <= 0:
        return 0.0
    last = 0
    for i, v in enumerate(vals):
        if v > 0:
            last = i
    if last == len(grid) - 1:
        return float(grid[-1])
    return float(sp_optimize.brentq(f, grid[last], grid[last + 1], xtol=1e-9))


# ---------------------------------------------------------------------------
# sweeps


def _evaluate_point(args):
    params, ch, disc, sec, estimation, kw = args
    return evaluate(params, ch, disc, sec, estimation, **kw)


def sweep(
    params: ProtocolParams,
    disc: Discretization,
    sec: SecurityBudget,
    axis: str,
    grid: Sequence[float],
    *,
    estimation: str = FINITE,
    excess_noise: float = 0.01,
    loss_db_per_km: float = 0.2,
    distance_km: float = 10.0,
    workers: int = 1,
    **kw,
) -> list[KeyRateReport]:
    """One report per grid point along ``distance_km`` or ``block_size``.

    Points are independent; with ``workers > 1`` they run in separate
    processes and are gathered in grid order, so the output does not depend
    on the worker count.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("sweep grid is empty")
    tasks = []
    for g in grid:
        if axis in ("distance", "distance_km"):
            p, d = params, float(g)
        elif axis in ("block_size", "blocksize", "n_total"):
            p, d = params.replace(n_total=int(g)), distance_km
        else:
            raise ValueError(f"axis must be 'distance_km' or 'block_size', got {axis!r}")
        ch = ChannelModel.from_distance(d, excess_noise, loss_db_per_km)
        validate(p, disc, sec, ch)
        tasks.append((p, ch, disc, sec, estimation, kw))
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_evaluate_point, tasks))
    return [_evaluate_point(t) for t in tasks]


# ---------------------------------------------------------------------------
# optimizer

FREE_PARAMETERS = ("m_fraction", "v_m2_fraction", "bits", "v_m")

_RANGES = {
    "m_fraction": (0.01, 0.99),
    "v_m2_fraction": (0.02, 0.98),
    "bits": (6, 16),
    "v_m": (1e-2, 1e2),
}


@dataclass
class OptimizationResult:
    best: KeyRateReport
    argmax: dict
    trace: list[dict] = field(default_factory=list)

    @property
    def feasible(self) -> bool:
        return self.best.rate > 0

    def trace_csv(self) -> str:
        if not self.trace:
            return ""
        cols = list(self.trace[0])
        out = io.StringIO()
        out.write(",".join(cols) + "\n")
        for row in self.trace:
            out.write(",".join(_fmt(row[c]) for c in cols) + "\n")
        return out.getvalue()


def _current_value(name, params, disc):
    if name == "m_fraction":
        return params.m_pe / params.n_total
    if name == "v_m2_fraction":
        return params.v_m2 / params.v_m
    if name == "bits":
        return int(disc.bits)
    return params.v_m


def _apply(values, params, disc):
    changes = {}
    if "v_m" in values:
        changes["v_m"] = float(values["v_m"])
    p = params.replace(**changes) if changes else params
    if "v_m2_fraction" in values:
        v_m2 = p.v_m * float(values["v_m2_fraction"])
        p = dataclasses.replace(p, v_m2=v_m2, v_m1=p.v_m - v_m2)
    if "m_fraction" in values:
        m = int(round(float(values["m_fraction"]) * p.n_total))
        p = dataclasses.replace(p, m_pe=min(max(m, 1), p.n_total - 1))
    d = dataclasses.replace(disc, bits=int(values["bits"])) if "bits" in values else disc
    return p, d


def _coarse_grid(name, n_points):
    lo, hi = _RANGES[name]
    if name == "bits":
        return [float(b) for b in range(lo, hi + 1)]
    if name == "v_m":
        return list(np.geomspace(lo, hi, n_points))
    return list(np.linspace(lo, hi, n_points))


def _refined_grid(name, centre, step, n_points):
    lo, hi = _RANGES[name]
    if name == "bits":
        b = int(centre)
        return [float(x) for x in (b - 1, b, b + 1) if lo <= x <= hi]
    if name == "v_m":
        # step is a log10 spacing
        c = math.log10(centre)
        pts = np.linspace(max(c - step, math.log10(lo)), min(c + step, math.log10(hi)), n_points)
        return list(10.0 ** pts)
    return list(np.linspace(max(centre - step, lo), min(centre + step, hi), n_points))


def _grid_step(name, grid):
    if name == "bits" or len(grid) < 2:
        return 1.0
    if name == "v_m":
        return abs(math.log10(grid[1]) - math.log10(grid[0]))
    return abs(grid[1] - grid[0])


def optimize(
    params: ProtocolParams,
    ch: ChannelModel,
    disc: Discretization,
    sec: SecurityBudget,
    free: Sequence[str],
    *,
    estimation: str = FINITE,
    n_points: int = 21,
    refinements: int = 2,
    **kw,
) -> OptimizationResult:
    """Coordinate grid search maximizing the rate over ``free`` parameters.

    ``free`` is a subset of ``m_fraction`` (single mode), ``v_m2_fraction``
    (double mode), ``bits`` and ``v_m``. The first pass scans each
    parameter over its full range in turn; each refinement pass rescans it
    on ``n_points`` points spanning one previous grid step either side of
    the incumbent. Every evaluation is recorded in the trace, so the trace
    length is the sum of all grid sizes. Ties keep the earlier point.
    Configurations that fail validation score zero.
    """
    free = list(dict.fromkeys(free))
    bad = [f for f in free if f not in FREE_PARAMETERS]
    if bad:
        raise ValueError(f"unknown free parameters {bad}; choose from {FREE_PARAMETERS}")
    if "m_fraction" in free and params.mode != SINGLE:
        raise ValueError("m_fraction is a single-mode parameter")
    if "v_m2_fraction" in free and params.mode != DOUBLE:
        raise ValueError("v_m2_fraction is a double-mode parameter")
    if n_points < 2:
        raise ValueError("n_points must be >= 2")

    current = {name: _current_value(name, params, disc) for name in free}
    best_report: KeyRateReport | None = None
    best_values = dict(current)
    steps = {}
    trace: list[dict] = []
    for pass_no in range(refinements + 1):
        for name in free:
            if pass_no == 0:
                grid = _coarse_grid(name, n_points)
            else:
                grid = _refined_grid(name, best_values[name], steps[name], n_points)
            steps[name] = _grid_step(name, grid)
            for g in grid:
                values = dict(best_values)
                values[name] = g
                report = _score(values, params, ch, disc, sec, estimation, kw)
                row = {"pass": pass_no, "parameter": name}
                row.update({k: float(values[k]) for k in free})
                row.update(rate=report.rate, ell_low=report.ell_low, abort_reason=report.abort_reason)
                trace.append(row)
                if best_report is None or report.rate > best_report.rate:
                    best_report, best_values = report, values
    if best_report is None:  # no free parameters: evaluate the given point
        best_report = _score({}, params, ch, disc, sec, estimation, kw)
    argmax = {k: (int(v) if k == "bits" else float(v)) for k, v in best_values.items()}
    return OptimizationResult(best=best_report, argmax=argmax, trace=trace)


def _score(values, params, ch, disc, sec, estimation, kw):
    p, d = _apply(values, params, disc)
    try:
        validate(p, d, sec, ch)
        return evaluate(p, ch, d, sec, estimation, **kw)
    except ValueError as exc:
        report = _invalid_report(p, ch, d, sec, estimation)
        return dataclasses.replace(report, abort_reason=f"{ABORT_INVALID}: {exc}")


def _invalid_report(p, ch, d, sec, estimation):
    snap = _snapshot(p, ch, d, sec, None)
    snap["estimation"] = estimation
    nan = math.nan
    return KeyRateReport(
        **snap, tau_used=nan, v_eps_used=nan, overlap_c=nan, d0=nan, mu=nan, p_alpha=nan,
        eps_prime=nan, h_max=nan, h_min=nan, entropy_ref=nan, mutual_info=nan, leak_ec=nan,
        correction=nan, ell_low=-math.inf, rate=0.0, abort_reason=ABORT_INVALID,
    )
