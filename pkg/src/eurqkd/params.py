"""Protocol, channel, discretization and security settings.

Every quantity is in shot-noise units (vacuum quadrature variance = 1).
Value types are frozen dataclasses; :func:`validate` checks the cross-field
invariants and reports every violation at once.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from scipy import stats

SINGLE, DOUBLE = "single", "double"
DR, RR = "dr", "rr"

DEFAULT_SQUEEZING_DB = 13.1
DEFAULT_ANTI_SQUEEZING_DB = 25.8
DEFAULT_LOSS_DB_PER_KM = 0.2


class ConfigError(ValueError):
    """Raised when a configuration violates one or more invariants."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid configuration: " + "; ".join(self.violations))


def squeezed_variance(db: float) -> float:
    """Variance of the squeezed quadrature, ``10^(-dB/10)``."""
    return 10.0 ** (-db / 10.0)


def anti_squeezed_variance(db: float) -> float:
    return 10.0 ** (db / 10.0)


def tau_from_distance(distance_km: float, loss_db_per_km: float = DEFAULT_LOSS_DB_PER_KM) -> float:
    """Fiber transmittance ``10^(-loss * d / 10)``."""
    if distance_km < 0 or not math.isfinite(distance_km):
        raise ValueError(f"distance must be finite and >= 0, got {distance_km}")
    if not loss_db_per_km > 0:
        raise ValueError(f"loss coefficient must be positive, got {loss_db_per_km}")
    return 10.0 ** (-loss_db_per_km * distance_km / 10.0)


def distance_from_tau(tau: float, loss_db_per_km: float = DEFAULT_LOSS_DB_PER_KM) -> float:
    if not 0 < tau <= 1:
        raise ValueError(f"tau must be in (0, 1], got {tau}")
    return 10.0 * math.log10(1.0 / tau) / loss_db_per_km


@dataclass(frozen=True)
class ProtocolParams:
    """Source, modulation, block and reconciliation settings.

    ``v_m`` defaults to ``1/v_s - v_s``, the modulation that makes the
    prepare-and-measure ensemble match a pure two-mode squeezed state. In
    double mode an unset split defaults to ``v_m1 = v_m2 = v_m / 2`` and an
    unset ``m_pe`` is ignored. In single mode ``m_pe`` defaults to ``N / 2``.
    """

    v_s: float = squeezed_variance(DEFAULT_SQUEEZING_DB)
    v_anti: float = anti_squeezed_variance(DEFAULT_ANTI_SQUEEZING_DB)
    v_m: float | None = None
    v_m1: float | None = None
    v_m2: float | None = None
    beta: float = 0.95
    direction: str = RR
    n_total: int = 10**9
    m_pe: int | None = None
    mode: str = SINGLE

    def __post_init__(self):
        if self.v_m is None and self.v_s > 0:
            object.__setattr__(self, "v_m", 1.0 / self.v_s - self.v_s)
        if self.mode == DOUBLE and self.v_m is not None:
            if self.v_m1 is None and self.v_m2 is None:
                object.__setattr__(self, "v_m1", self.v_m / 2.0)
                object.__setattr__(self, "v_m2", self.v_m / 2.0)
            elif self.v_m1 is None:
                object.__setattr__(self, "v_m1", self.v_m - self.v_m2)
            elif self.v_m2 is None:
                object.__setattr__(self, "v_m2", self.v_m - self.v_m1)
        if self.m_pe is None and self.mode == SINGLE:
            object.__setattr__(self, "m_pe", int(self.n_total) // 2)
        object.__setattr__(self, "n_total", int(self.n_total))
        if self.m_pe is not None:
            object.__setattr__(self, "m_pe", int(self.m_pe))
        object.__setattr__(self, "direction", str(self.direction).lower())
        object.__setattr__(self, "mode", str(self.mode).lower())

    @property
    def n_key(self) -> int:
        """Signals that enter key generation."""
        if self.mode == DOUBLE:
            return self.n_total
        return self.n_total - self.m_pe

    @property
    def m_estimation(self) -> int:
        """Signals used to estimate the channel."""
        return self.n_total if self.mode == DOUBLE else self.m_pe

    @property
    def v_key(self) -> float:
        """Variance of the key-bearing modulation."""
        return self.v_m1 if self.mode == DOUBLE else self.v_m

    @property
    def v_pe(self) -> float:
        """Variance of the modulation revealed for estimation."""
        return self.v_m2 if self.mode == DOUBLE else self.v_m

    def replace(self, **changes) -> "ProtocolParams":
        if "v_m" in changes and self.mode == DOUBLE and not {"v_m1", "v_m2"} & changes.keys():
            frac = self.v_m2 / self.v_m if self.v_m else 0.5
            changes["v_m2"] = changes["v_m"] * frac
            changes["v_m1"] = changes["v_m"] - changes["v_m2"]
        if "n_total" in changes and "m_pe" not in changes and self.mode == SINGLE:
            frac = self.m_pe / self.n_total
            changes["m_pe"] = max(1, int(round(changes["n_total"] * frac)))
        if changes.get("mode") == SINGLE and "m_pe" not in changes and self.m_pe is None:
            changes["m_pe"] = int(changes.get("n_total", self.n_total)) // 2
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class Discretization:
    """Detection half-range ``alpha`` and resolution in ``bits``."""

    alpha: float = 61.6
    bits: int = 12

    @property
    def n_bins(self) -> int:
        return 2 ** int(self.bits)

    @property
    def delta(self) -> float:
        return 2.0 * self.alpha / self.n_bins


@dataclass(frozen=True)
class SecurityBudget:
    """Smoothing and failure parameters.

    ``eps_1`` (smoothness of the physical part) defaults to ``eps_s / 4``.
    ``z_pe`` and ``eps_pe`` are stored as a pair rather than recomputed from
    each other; 6.5 standard deviations go with 1e-10.
    """

    eps_c: float = 1e-9
    eps_s: float = 1e-9
    eps_r: float = 1e-9
    eps_1: float | None = None
    eps_pe: float = 1e-10
    z_pe: float = 6.5
    p_pass: float = 1.0

    def __post_init__(self):
        if self.eps_1 is None:
            object.__setattr__(self, "eps_1", self.eps_s / 4.0)

    def implied_eps_pe(self) -> float:
        """One-sided Gaussian tail at ``z_pe`` (about 4e-11 for 6.5)."""
        return float(stats.norm.sf(self.z_pe))


@dataclass(frozen=True)
class ChannelModel:
    """Lossy, noisy Gaussian channel.

    ``omega`` is the variance of the equivalent entangling-cloner state and
    is undefined for a lossless channel.
    """

    tau: float
    excess_noise: float = 0.01
    loss_db_per_km: float = DEFAULT_LOSS_DB_PER_KM

    @classmethod
    def from_distance(cls, distance_km: float, excess_noise: float = 0.01,
                      loss_db_per_km: float = DEFAULT_LOSS_DB_PER_KM) -> "ChannelModel":
        return cls(tau_from_distance(distance_km, loss_db_per_km), excess_noise, loss_db_per_km)

    @classmethod
    def from_omega(cls, tau: float, omega: float,
                   loss_db_per_km: float = DEFAULT_LOSS_DB_PER_KM) -> "ChannelModel":
        return cls(tau, (1.0 - tau) * (omega - 1.0) / tau, loss_db_per_km)

    @property
    def omega(self) -> float | None:
        if self.tau >= 1.0:
            return None
        return 1.0 + self.tau * self.excess_noise / (1.0 - self.tau)

    @property
    def v_eps(self) -> float:
        """Excess noise referred to the channel output, ``tau * eps``."""
        return self.tau * self.excess_noise

    @property
    def distance_km(self) -> float:
        return distance_from_tau(self.tau, self.loss_db_per_km)


def _in_open_unit(x) -> bool:
    return x is not None and 0.0 < x < 1.0


def validate(params: ProtocolParams, disc: Discretization, sec: SecurityBudget,
             channel: ChannelModel | None = None):
    """Check every invariant and return the configuration unchanged.

    Raises
    ------
    ConfigError
        Listing every violated invariant.
    """
    bad = []
    p = params
    if not (p.v_s is not None and 0 < p.v_s <= 1):
        bad.append(f"v_s must be in (0, 1], got {p.v_s}")
    if not (p.v_anti is not None and p.v_anti >= 1):
        bad.append(f"v_anti must be >= 1, got {p.v_anti}")
    elif p.v_s is not None and p.v_s * p.v_anti < 1 - 1e-12:
        bad.append(f"v_s * v_anti must be >= 1, got {p.v_s * p.v_anti:.6g}")
    if not (p.v_m is not None and p.v_m > 0):
        bad.append(f"v_m must be positive, got {p.v_m}")
    if not (0 < p.beta <= 1):
        bad.append(f"beta must be in (0, 1], got {p.beta}")
    if p.direction not in (DR, RR):
        bad.append(f"direction must be 'dr' or 'rr', got {p.direction!r}")
    if p.n_total < 2:
        bad.append(f"n_total must be >= 2, got {p.n_total}")
    if p.mode == SINGLE:
        if p.m_pe is None or not 0 < p.m_pe < p.n_total:
            bad.append(f"single mode needs 0 < m_pe < n_total, got m_pe={p.m_pe}, n_total={p.n_total}")
    elif p.mode == DOUBLE:
        if p.v_m1 is None or p.v_m2 is None or p.v_m1 < 0 or p.v_m2 < 0:
            bad.append(f"double mode needs v_m1, v_m2 >= 0, got {p.v_m1}, {p.v_m2}")
        elif p.v_m is not None and not math.isclose(p.v_m1 + p.v_m2, p.v_m, rel_tol=1e-9, abs_tol=1e-12):
            bad.append(f"v_m1 + v_m2 = {p.v_m1 + p.v_m2} != v_m = {p.v_m}")
        elif p.v_m2 == 0:
            bad.append("double mode needs v_m2 > 0 to estimate the channel")
    else:
        bad.append(f"mode must be 'single' or 'double', got {p.mode!r}")

    if not disc.alpha > 0:
        bad.append(f"alpha must be positive, got {disc.alpha}")
    if int(disc.bits) != disc.bits or disc.bits < 1:
        bad.append(f"bits must be a positive integer, got {disc.bits}")

    for name in ("eps_c", "eps_s", "eps_r", "eps_1", "eps_pe"):
        if not _in_open_unit(getattr(sec, name)):
            bad.append(f"{name} must be in (0, 1), got {getattr(sec, name)}")
    if not sec.z_pe >= 0:
        bad.append(f"z_pe must be >= 0, got {sec.z_pe}")
    if not 0 < sec.p_pass <= 1:
        bad.append(f"p_pass must be in (0, 1], got {sec.p_pass}")

    if channel is not None:
        if not 0 < channel.tau <= 1:
            bad.append(f"tau must be in (0, 1], got {channel.tau}")
        if not channel.excess_noise >= 0:
            bad.append(f"excess_noise must be >= 0, got {channel.excess_noise}")
        if not channel.loss_db_per_km > 0:
            bad.append(f"loss_db_per_km must be positive, got {channel.loss_db_per_km}")
    if bad:
        raise ConfigError(bad)
    return params, disc, sec


@dataclass(frozen=True)
class Config:
    """A full configuration as read from a JSON file."""

    protocol: ProtocolParams = field(default_factory=ProtocolParams)
    discretization: Discretization = field(default_factory=Discretization)
    security: SecurityBudget = field(default_factory=SecurityBudget)
    excess_noise: float = 0.01
    loss_db_per_km: float = DEFAULT_LOSS_DB_PER_KM
    distance_km: float = 10.0

    def channel(self, distance_km: float | None = None) -> ChannelModel:
        d = self.distance_km if distance_km is None else distance_km
        return ChannelModel.from_distance(d, self.excess_noise, self.loss_db_per_km)

    def validated(self) -> "Config":
        validate(self.protocol, self.discretization, self.security, self.channel())
        return self

    def to_dict(self) -> dict[str, Any]:
        return {
            "protocol": dataclasses.asdict(self.protocol),
            "discretization": dataclasses.asdict(self.discretization),
            "security": dataclasses.asdict(self.security),
            "channel": {
                "excess_noise": self.excess_noise,
                "loss_db_per_km": self.loss_db_per_km,
                "distance_km": self.distance_km,
            },
        }


_SECTIONS = {
    "protocol": ProtocolParams,
    "discretization": Discretization,
    "security": SecurityBudget,
}
_CHANNEL_KEYS = {"excess_noise", "loss_db_per_km", "distance_km"}


def config_from_dict(data: dict[str, Any]) -> Config:
    """Build a :class:`Config` from nested mappings.

    ``protocol`` also accepts ``squeezing_db`` and ``anti_squeezing_db`` in
    place of ``v_s`` and ``v_anti``. Unknown keys are rejected.
    """
    if not isinstance(data, dict):
        raise ConfigError(["configuration root must be a JSON object"])
    bad = []
    unknown = set(data) - set(_SECTIONS) - {"channel"}
    if unknown:
        bad.append(f"unknown sections: {sorted(unknown)}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        section = dict(data.get(name) or {})
        if name == "protocol":
            if "squeezing_db" in section:
                section["v_s"] = squeezed_variance(float(section.pop("squeezing_db")))
            if "anti_squeezing_db" in section:
                section["v_anti"] = anti_squeezed_variance(float(section.pop("anti_squeezing_db")))
        allowed = {f.name for f in dataclasses.fields(cls)}
        extra = set(section) - allowed
        if extra:
            bad.append(f"unknown keys in {name}: {sorted(extra)}")
            continue
        try:
            kwargs[name] = cls(**section)
        except (TypeError, ValueError) as exc:
            bad.append(f"{name}: {exc}")
    chan = dict(data.get("channel") or {})
    extra = set(chan) - _CHANNEL_KEYS
    if extra:
        bad.append(f"unknown keys in channel: {sorted(extra)}")
    if bad:
        raise ConfigError(bad)
    cfg = Config(
        protocol=kwargs["protocol"],
        discretization=kwargs["discretization"],
        security=kwargs["security"],
        **{k: float(v) for k, v in chan.items()},
    )
    return cfg.validated()


def load_config(path: str | Path) -> Config:
    """Read a JSON configuration file (see README for the schema)."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError([f"cannot read {path}: {exc}"]) from exc
    if isinstance(data, dict) and "config" in data and "command" in data:
        # a run manifest: reuse its resolved configuration
        data = data["config"]
    return config_from_dict(data)
