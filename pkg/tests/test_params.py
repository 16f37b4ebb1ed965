import json
import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from eurqkd import params as P
from eurqkd.params import (
    ChannelModel,
    Config,
    ConfigError,
    Discretization,
    ProtocolParams,
    SecurityBudget,
)


def test_tau_from_distance_examples():
    assert P.tau_from_distance(0.0) == 1.0
    assert P.tau_from_distance(10.0, 0.2) == pytest.approx(10 ** -0.2, rel=1e-15)
    assert P.tau_from_distance(10.0) == pytest.approx(0.6310, abs=5e-5)
    assert P.tau_from_distance(15.0) == pytest.approx(0.5012, abs=5e-5)


@pytest.mark.parametrize("d", [-1e-9, -3.0, math.inf, math.nan])
def test_tau_from_distance_rejects_bad_distance(d):
    with pytest.raises(ValueError):
        P.tau_from_distance(d)


def test_tau_from_distance_rejects_bad_loss():
    with pytest.raises(ValueError):
        P.tau_from_distance(1.0, 0.0)


@given(st.floats(0.0, 500.0), st.floats(0.01, 2.0))
def test_distance_round_trip(d, loss):
    back = P.distance_from_tau(P.tau_from_distance(d, loss), loss)
    assert back == pytest.approx(d, rel=1e-9, abs=1e-9)


def test_distance_at_unit_tau_is_positive_zero():
    assert math.copysign(1.0, P.distance_from_tau(1.0)) == 1.0


def test_squeezing_conversions():
    assert P.squeezed_variance(13.1) == pytest.approx(0.04898, abs=5e-6)
    assert P.anti_squeezed_variance(25.8) == pytest.approx(380.19, abs=5e-3)
    assert P.squeezed_variance(0.0) == 1.0


def test_default_protocol():
    p = ProtocolParams()
    assert p.v_s == pytest.approx(10 ** -1.31)
    assert p.v_m == pytest.approx(1 / p.v_s - p.v_s)
    assert p.beta == 0.95
    assert p.m_pe == p.n_total // 2
    assert p.n_key == p.n_total - p.m_pe
    assert p.m_estimation == p.m_pe


def test_double_mode_split_defaults():
    p = ProtocolParams(mode="double", v_m=40.0)
    assert p.v_m1 == p.v_m2 == 20.0
    assert p.n_key == p.n_total == p.m_estimation
    assert p.v_key == 20.0 and p.v_pe == 20.0
    q = ProtocolParams(mode="double", v_m=40.0, v_m2=10.0)
    assert q.v_m1 == 30.0


def test_replace_keeps_pe_fraction_and_split():
    p = ProtocolParams(n_total=1000, m_pe=250)
    assert p.replace(n_total=10**6).m_pe == 250_000
    d = ProtocolParams(mode="double", v_m=40.0, v_m2=10.0)
    r = d.replace(v_m=20.0)
    assert (r.v_m1, r.v_m2) == pytest.approx((15.0, 5.0))


def test_frozen():
    with pytest.raises(AttributeError):
        ProtocolParams().beta = 0.9


def test_validate_accepts_reference_setup():
    p = ProtocolParams(v_s=0.049, v_m=40.0, beta=0.95)
    assert P.validate(p, Discretization(), SecurityBudget()) == (p, Discretization(), SecurityBudget())


def test_validate_rejects_no_key_data():
    with pytest.raises(ConfigError):
        P.validate(ProtocolParams(n_total=100, m_pe=100), Discretization(), SecurityBudget())


def test_validate_rejects_inexact_split():
    p = ProtocolParams(mode="double", v_m=40.0, v_m1=10.0, v_m2=20.0)
    with pytest.raises(ConfigError, match="v_m1 \\+ v_m2"):
        P.validate(p, Discretization(), SecurityBudget())


def test_validate_lists_every_violation():
    p = ProtocolParams(beta=1.5, direction="sideways", n_total=100, m_pe=100)
    with pytest.raises(ConfigError) as info:
        P.validate(p, Discretization(alpha=-1.0), SecurityBudget(eps_c=2.0), ChannelModel(tau=1.5))
    v = info.value.violations
    assert len(v) == 6
    joined = " ".join(v)
    for key in ("beta", "direction", "m_pe", "alpha", "eps_c", "tau"):
        assert key in joined
    assert isinstance(info.value, ValueError)


def test_validate_uncertainty_relation():
    with pytest.raises(ConfigError, match="v_s \\* v_anti"):
        P.validate(ProtocolParams(v_s=0.1, v_anti=2.0), Discretization(), SecurityBudget())


def test_discretization_geometry():
    d = Discretization(alpha=61.6, bits=12)
    assert d.n_bins == 4096
    assert d.delta * d.n_bins == pytest.approx(2 * 61.6)


def test_security_defaults():
    s = SecurityBudget()
    assert s.eps_1 == s.eps_s / 4
    assert s.p_pass == 1.0
    assert 1e-11 < s.implied_eps_pe() < 1e-10


def test_channel_model():
    ch = ChannelModel.from_distance(10.0, 0.01)
    assert ch.v_eps == pytest.approx(ch.tau * 0.01)
    assert ch.distance_km == pytest.approx(10.0)
    again = ChannelModel.from_omega(ch.tau, ch.omega)
    assert again.excess_noise == pytest.approx(0.01, rel=1e-12)
    assert ChannelModel(tau=1.0).omega is None


def test_config_round_trip(tmp_path):
    cfg = Config(protocol=ProtocolParams(n_total=10**6, mode="double", v_m=30.0),
                 discretization=Discretization(alpha=50.0, bits=10),
                 security=SecurityBudget(eps_s=1e-8), excess_noise=0.02, distance_km=3.0)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert P.load_config(path) == cfg


def test_config_accepts_db_aliases():
    cfg = P.config_from_dict({"protocol": {"squeezing_db": 10.0, "anti_squeezing_db": 12.0}})
    assert cfg.protocol.v_s == pytest.approx(0.1)
    assert cfg.protocol.v_anti == pytest.approx(10 ** 1.2)


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError) as info:
        P.config_from_dict({"protocol": {"foo": 1}, "channel": {"bar": 2}, "extra": {}})
    assert len(info.value.violations) == 3


def test_config_reads_manifest(tmp_path):
    cfg = Config(distance_km=7.0)
    path = tmp_path / "m.json"
    path.write_text(json.dumps({"command": "keyrate", "config": cfg.to_dict()}))
    assert P.load_config(path).distance_km == 7.0


def test_config_unreadable(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        P.load_config(path)
    with pytest.raises(ConfigError):
        P.load_config(tmp_path / "missing.json")
