"""End-to-end protocol simulation for validating the estimators and bounds.

Each trial draws its own data from the stream ``substream(seed, index)``
(Philox keyed by the trial index), so a trial's outcome does not depend on
which worker runs it or in what order. Aggregates are reduced over trials in
index order after all trials have finished.

Within a trial, single mode takes the first ``m`` samples as the revealed
estimation set. The samples are i.i.d., so this is distributed like a
uniformly random subset.
"""
from __future__ import annotations

import dataclasses
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path

import numpy as np
from scipy import stats

from . import bounds, mathfn
from .channel import Batch, bob_variance, discretize, substream, transmit, write_batch_csv
from .estimation import EstimationReport, excess_variance, run_estimation, tau_variance
from .params import DOUBLE, SINGLE, ChannelModel, Discretization, ProtocolParams, SecurityBudget

# per-trial memory is about 12 float64 arrays of the sample size
_BYTES_PER_SAMPLE = 12 * 8
_SECONDS_PER_SAMPLE = 2.5e-7
MAX_SAMPLES_PER_TRIAL = 50_000_000
MAX_TOTAL_SECONDS = 3600.0


class InfeasibleSize(ValueError):
    """The requested simulation would not fit in memory or a reasonable time."""


@dataclass(frozen=True)
class TrialConfig:
    """A Monte-Carlo experiment.

    ``params.n_total`` is overridden by ``samples_per_trial``; in single mode
    the estimation fraction ``m_pe / n_total`` is kept. ``z`` is the
    confidence width checked by the coverage counts, independent of
    ``sec.z_pe``.
    """

    params: ProtocolParams
    ch: ChannelModel
    disc: Discretization = field(default_factory=Discretization)
    sec: SecurityBudget = field(default_factory=SecurityBudget)
    seed: int = 0
    trials: int = 200
    samples_per_trial: int = 20_000
    z: float = 3.0
    rescale: bool = True

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError(f"trials must be >= 1, got {self.trials}")
        if self.samples_per_trial < 2:
            raise ValueError(f"samples_per_trial must be >= 2, got {self.samples_per_trial}")
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {self.seed}")

    @property
    def mode(self) -> str:
        return self.params.mode

    @property
    def trial_params(self) -> ProtocolParams:
        return self.params.replace(n_total=int(self.samples_per_trial))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "trials": self.trials,
            "samples_per_trial": self.samples_per_trial,
            "z": self.z,
            "rescale": self.rescale,
            "protocol": dataclasses.asdict(self.trial_params),
            "channel": dataclasses.asdict(self.ch),
            "discretization": dataclasses.asdict(self.disc),
            "security": dataclasses.asdict(self.sec),
        }


def resource_estimate(cfg: TrialConfig) -> dict:
    """Rough peak memory per worker and single-core run time."""
    n = cfg.samples_per_trial
    return {
        "memory_bytes": n * _BYTES_PER_SAMPLE,
        "seconds": cfg.trials * n * _SECONDS_PER_SAMPLE,
    }


def check_feasible(cfg: TrialConfig, max_seconds: float = MAX_TOTAL_SECONDS) -> None:
    est = resource_estimate(cfg)
    problems = []
    if cfg.samples_per_trial > MAX_SAMPLES_PER_TRIAL:
        problems.append(f"{cfg.samples_per_trial} samples per trial needs about "
                        f"{est['memory_bytes'] / 2**30:.1f} GiB per worker "
                        f"(limit {MAX_SAMPLES_PER_TRIAL} samples)")
    if est["seconds"] > max_seconds:
        problems.append(f"{cfg.trials} trials x {cfg.samples_per_trial} samples needs about "
                        f"{est['seconds']:.0f} s of CPU time (limit {max_seconds:.0f} s)")
    if problems:
        raise InfeasibleSize("; ".join(problems))


@dataclass(frozen=True)
class TrialRecord:
    index: int
    estimation: EstimationReport
    n_samples: int
    n_key: int
    d_pe: float
    d_key: float
    d_m1m2: float
    out_of_range: int
    mu: float
    triangle_ok: bool
    serfling_ok: bool
    tau_miss: bool
    veps_miss: bool

    def flat(self) -> dict:
        row = {"index": self.index}
        row.update(self.estimation.to_dict())
        for f in dataclasses.fields(self):
            if f.name not in ("index", "estimation"):
                row[f.name] = getattr(self, f.name)
        return row


def _simulate_batch(cfg: TrialConfig, index: int):
    p = cfg.trial_params
    rng = substream(cfg.seed, index)
    n = p.n_total
    if p.mode == DOUBLE:
        m1 = rng.standard_normal(n) * math.sqrt(p.v_m1)
        m2 = rng.standard_normal(n) * math.sqrt(p.v_m2)
        x_m = m1 + m2
    else:
        m1 = m2 = None
        x_m = rng.standard_normal(n) * math.sqrt(p.v_m)
    x_a = x_m + rng.standard_normal(n) * math.sqrt(p.v_s)
    b = transmit(x_a, cfg.ch, rng)
    if p.mode == DOUBLE:
        return p, Batch(b=b, m1=m1, m2=m2)
    return p, Batch(b=b, m=x_m)


def simulate_batch(cfg: TrialConfig, index: int) -> Batch:
    """The raw data of trial ``index`` (the same draws the trial uses)."""
    return _simulate_batch(cfg, index)[1]


def run_protocol_trial(cfg: TrialConfig, trial_index: int) -> TrialRecord:
    """Simulate, estimate and measure distances for one block."""
    p, batch = _simulate_batch(cfg, trial_index)
    disc = cfg.disc
    n = p.n_total
    k_b, outside = discretize(batch.b, disc)
    if p.mode == DOUBLE:
        est = run_estimation(batch, p, cfg.sec, z=cfg.z)
        r = math.sqrt(max(est.tau_hat, 0.0)) if cfg.rescale else 1.0
        k_1, _ = discretize(r * batch.m1, disc)
        k_2, _ = discretize(r * batch.m2, disc)
        d_pe = bounds.l1_distance(k_2, k_b)
        d_key = bounds.l1_distance(k_1, k_b)
        d_12 = bounds.l1_distance(k_1, k_2)
        triangle = d_key <= d_pe + d_12
        mu, serfling = 0.0, True
        n_key = n
    else:
        m = p.m_pe
        est = run_estimation(Batch(b=batch.b[:m], m=batch.m[:m]), p, cfg.sec, z=cfg.z)
        r = math.sqrt(max(est.tau_hat, 0.0)) if cfg.rescale else 1.0
        k_a, _ = discretize(r * batch.m, disc)
        d_pe = bounds.l1_distance(k_a[:m], k_b[:m])
        d_key = bounds.l1_distance(k_a[m:], k_b[m:])
        d_12 = math.nan
        triangle = True
        n_key = n - m
        mu = bounds.mu_fluctuation(disc, n, m, _eps_prime(cfg, p, n_key))
        serfling = d_key <= d_pe + mu
    return TrialRecord(
        index=int(trial_index),
        estimation=est,
        n_samples=n,
        n_key=n_key,
        d_pe=d_pe,
        d_key=d_key,
        d_m1m2=d_12,
        out_of_range=outside,
        mu=mu,
        triangle_ok=bool(triangle),
        serfling_ok=bool(serfling),
        tau_miss=bool(cfg.ch.tau < est.tau_low),
        veps_miss=bool(cfg.ch.v_eps > est.v_eps_up),
    )


def _eps_prime(cfg, p, n_key):
    p_alpha = mathfn.gaussian_tail(cfg.disc.alpha, bob_variance(p, cfg.ch))
    try:
        return bounds.eps_prime(cfg.sec, p_alpha, n_key).eps_prime
    except bounds.BudgetExhausted:
        # the sanity check still needs a threshold; drop the out-of-range term
        return cfg.sec.eps_s / (4.0 * cfg.sec.p_pass)


def run_trials(cfg: TrialConfig, workers: int = 1) -> list[TrialRecord]:
    """All trials in index order; ``workers`` only changes the wall time."""
    check_feasible(cfg)
    fn = partial(run_protocol_trial, cfg)
    idx = range(cfg.trials)
    if workers > 1 and cfg.trials > 1:
        chunk = max(1, cfg.trials // (8 * workers))
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, idx, chunksize=chunk))
    return [fn(i) for i in idx]


@dataclass
class TrialSummary:
    """Per-trial records and their aggregates."""

    config: TrialConfig
    records: list[TrialRecord]
    aggregates: dict = field(default_factory=dict)

    @property
    def trials(self) -> int:
        return len(self.records)

    def records_csv(self) -> str:
        rows = [r.flat() for r in self.records]
        cols = list(rows[0])
        out = io.StringIO()
        out.write(",".join(cols) + "\n")
        for row in rows:
            out.write(",".join(_fmt(row[c]) for c in cols) + "\n")
        return out.getvalue()

    def aggregates_csv(self) -> str:
        keys = list(self.aggregates)
        return ",".join(keys) + "\n" + ",".join(_fmt(self.aggregates[k]) for k in keys) + "\n"

    def to_json(self) -> str:
        doc = {"config": self.config.to_dict(), "aggregates": self.aggregates}
        return json.dumps(_json_safe(doc), indent=2, sort_keys=True) + "\n"


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, float):
        return f"{v:.17e}"
    return str(v)


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def _binomial(k: int, n: int) -> tuple[float, float, float]:
    ci = stats.binomtest(k, n).proportion_ci(confidence_level=0.95, method="exact")
    return k / n, float(ci.low), float(ci.high)


def summarize(cfg: TrialConfig, records: list[TrialRecord]) -> TrialSummary:
    """Aggregate per-trial records in index order."""
    records = sorted(records, key=lambda r: r.index)
    p = cfg.trial_params
    ch = cfg.ch
    t = len(records)
    m_used = records[0].estimation.m_used
    c_hat = np.array([r.estimation.c_mb_hat for r in records])
    tau_hat = np.array([r.estimation.tau_hat for r in records])
    veps_hat = np.array([r.estimation.v_eps_hat for r in records])
    var_tau_model = tau_variance(ch.tau, p, ch, m_used)
    var_veps_model = excess_variance(p, ch, m_used)
    ddof = 1 if t > 1 else 0
    agg = {
        "trials": t,
        "mode": p.mode,
        "m_used": m_used,
        "tau_true": ch.tau,
        "v_eps_true": ch.v_eps,
        "c_mb_true": math.sqrt(ch.tau) * p.v_pe,
        "c_mb_mean": float(np.mean(c_hat)),
        "c_mb_se": float(np.std(c_hat, ddof=ddof) / math.sqrt(t)),
        "tau_mean": float(np.mean(tau_hat)),
        "tau_var": float(np.var(tau_hat, ddof=ddof)),
        "tau_var_model": var_tau_model,
        "tau_var_ratio": float(np.var(tau_hat, ddof=ddof) / var_tau_model),
        "tau_se_model": math.sqrt(var_tau_model / t),
        "v_eps_mean": float(np.mean(veps_hat)),
        "v_eps_var": float(np.var(veps_hat, ddof=ddof)),
        "v_eps_var_model": var_veps_model,
        "v_eps_var_ratio": float(np.var(veps_hat, ddof=ddof) / var_veps_model),
        "v_eps_se_model": math.sqrt(var_veps_model / t),
        "tau_bias_first_order": _tau_bias(p, ch, m_used),
        "v_eps_bias_first_order": _v_eps_bias(p, ch, m_used),
        "z": cfg.z,
        "miss_rate_expected": float(stats.norm.sf(cfg.z)),
    }
    for name in ("tau", "veps"):
        k = sum(getattr(r, f"{name}_miss") for r in records)
        rate, lo, hi = _binomial(k, t)
        agg[f"{name}_misses"] = int(k)
        agg[f"{name}_miss_rate"] = rate
        agg[f"{name}_miss_ci_low"] = lo
        agg[f"{name}_miss_ci_high"] = hi
    agg["tau_low_clamped"] = sum(r.estimation.tau_low_clamped for r in records)
    agg["v_eps_up_clamped"] = sum(r.estimation.v_eps_up_clamped for r in records)
    agg["negative_v_eps"] = sum(r.estimation.negative_v_eps for r in records)

    outside = sum(r.out_of_range for r in records)
    n_samples = sum(r.n_samples for r in records)
    agg["out_of_range"] = int(outside)
    agg["p_alpha_empirical"] = outside / n_samples
    agg["p_alpha_model"] = mathfn.gaussian_tail(cfg.disc.alpha, bob_variance(p, ch))

    d0 = bounds.predicted_d0(p, ch, cfg.disc, rescale=cfg.rescale)
    agg["d_pe_mean"] = float(np.mean([r.d_pe for r in records]))
    agg["d_key_mean"] = float(np.mean([r.d_key for r in records]))
    if p.mode == DOUBLE:
        agg["d_m1m2_mean"] = float(np.mean([r.d_m1m2 for r in records]))
        # the model splits the total into the revealed-pair and modulation-pair parts
        agg["d0_predicted"] = d0
        agg["d_total_mean"] = agg["d_pe_mean"] + agg["d_m1m2_mean"]
    else:
        agg["d_m1m2_mean"] = math.nan
        agg["d0_predicted"] = d0
        agg["d_total_mean"] = agg["d_pe_mean"]
    agg["d0_relative_error"] = agg["d_total_mean"] / d0 - 1.0 if d0 > 0 else math.nan
    agg["triangle_violations"] = sum(not r.triangle_ok for r in records)
    agg["serfling_failures"] = sum(not r.serfling_ok for r in records)
    agg["mu"] = records[0].mu
    return TrialSummary(config=cfg, records=records, aggregates=agg)


def _residual(p, ch):
    v_n = 1.0 + ch.v_eps + ch.tau * (p.v_s - 1.0)
    if p.mode == DOUBLE:
        v_n += ch.tau * p.v_m1
    return v_n


def _tau_bias(p, ch, m):
    # E[c^2] = c^2 + Var(c): the squared covariance estimator overshoots
    return (2.0 * ch.tau + _residual(p, ch) / p.v_pe) / m


def _v_eps_bias(p, ch, m):
    # reusing tau_hat on the same samples pulls the residual towards the data;
    # first order in 1/m, dominated by 2 tau V / m for strong modulation
    v_m1 = p.v_m1 if p.mode == DOUBLE else 0.0
    return (2.0 * ch.tau * p.v_pe - _residual(p, ch)) / m + _tau_bias(p, ch, m) * (1.0 - p.v_s - v_m1)


def simulate(cfg: TrialConfig, workers: int = 1) -> TrialSummary:
    return summarize(cfg, run_trials(cfg, workers))


def coverage_experiment(cfg: TrialConfig, workers: int = 1) -> TrialSummary:
    """Count confidence-bound misses at ``cfg.z`` with binomial intervals."""
    if cfg.trials < 100:
        raise ValueError(f"coverage needs at least 100 trials, got {cfg.trials}")
    return simulate(cfg, workers)


def distance_experiment(cfg: TrialConfig, workers: int = 1) -> TrialSummary:
    """Empirical distances, triangle inequality and the sampling sanity check."""
    return simulate(cfg, workers)


def dump_batches(cfg: TrialConfig, directory: str | Path, limit: int | None = None) -> list[Path]:
    """Write the raw data of the first ``limit`` trials as batch CSV files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(cfg.trials if limit is None else min(limit, cfg.trials)):
        path = directory / f"trial_{i:06d}.csv"
        write_batch_csv(simulate_batch(cfg, i), path)
        paths.append(path)
    return paths


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str
    skipped: bool = False


def check_invariants(summary: TrialSummary) -> list[Check]:
    """Statistical invariants that must hold for a correct implementation.

    Checks whose sample size is too small to be meaningful are reported as
    skipped (and passed).
    """
    a = summary.aggregates
    t = summary.trials
    out = []

    def add(name, ok, detail, skip=False):
        out.append(Check(name, bool(ok) or skip, detail, skip))

    add("triangle_inequality", a["triangle_violations"] == 0,
        f"{a['triangle_violations']} violations in {t} trials")
    if summary.config.mode == SINGLE:
        allowed = t // 200
        add("serfling_sanity", a["serfling_failures"] <= allowed,
            f"{a['serfling_failures']} failures in {t} trials (allowed {allowed})")
    dev = abs(a["c_mb_mean"] - a["c_mb_true"])
    add("covariance_unbiased", dev <= 4 * a["c_mb_se"] + 1e-15,
        f"|mean - true| = {dev:.3g}, 4 se = {4 * a['c_mb_se']:.3g}")
    dev = abs(a["tau_mean"] - a["tau_true"])
    add("tau_unbiased", dev <= 4 * a["tau_se_model"],
        f"|mean - true| = {dev:.3g}, 4 se = {4 * a['tau_se_model']:.3g}")
    dev = abs(a["v_eps_mean"] - a["v_eps_true"])
    add("v_eps_unbiased", dev <= 4 * a["v_eps_se_model"],
        f"|mean - true| = {dev:.3g}, 4 se = {4 * a['v_eps_se_model']:.3g}")
    few = t < 1000
    for key in ("tau_var_ratio", "v_eps_var_ratio"):
        add(key, 0.8 <= a[key] <= 1.2, f"{a[key]:.4f} (needs [0.8, 1.2]"
            + (", skipped below 1000 trials)" if few else ")"), skip=few)
    if a["z"] >= 3:
        limit = 0.01 if a["z"] < 6 else 0.0
        for name in ("tau", "veps"):
            rate = a[f"{name}_miss_rate"]
            add(f"{name}_coverage", rate <= limit,
                f"miss rate {rate:.4g} at z={a['z']} (limit {limit})")
    expected = a["p_alpha_model"] * summary.trials * summary.records[0].n_samples
    if expected >= 10:
        sd = math.sqrt(expected * (1 - a["p_alpha_model"]))
        add("p_alpha", abs(a["out_of_range"] - expected) <= 3 * sd,
            f"{a['out_of_range']} out of range, expected {expected:.1f} +- {sd:.1f}")
    return out
