"""Gaussian channel: analytic variances, sampling, binning and batch I/O.

The entangling cloner is represented by its Gaussian-equivalent additive
noise at Bob, of variance ``(1 - tau) + tau * eps``. Eve's modes are never
simulated.

Random streams
--------------
Samples come from numpy's Philox4x32 counter-based generator. A stream is
identified by ``(seed, *key)``; :func:`substream` builds it through
``SeedSequence(seed, spawn_key=key)`` so that the draws for a given key are
independent of how work is scheduled and are bit-identical across platforms.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mathfn import bin_index
from .params import DOUBLE, ChannelModel, Discretization, ProtocolParams


def substream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``(seed, key)`` built on Philox."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def noise_variance(params: ProtocolParams, ch: ChannelModel) -> float:
    """Aggregate noise variance ``V_N = 1 + tau*eps + tau*(V_S - 1)`` at Bob."""
    return 1.0 + ch.v_eps + ch.tau * (params.v_s - 1.0)


def noise_variance_double(params: ProtocolParams, ch: ChannelModel) -> float:
    """Noise seen when only the revealed modulation is treated as signal.

    The secret part of the modulation acts as extra source noise:
    ``V_N* = tau * (V_S + V_M1 - 1) + 1 + tau*eps``.
    """
    if params.mode != DOUBLE:
        raise ValueError("noise_variance_double needs a double-modulation configuration")
    return ch.tau * (params.v_s + params.v_m1 - 1.0) + 1.0 + ch.v_eps


def bob_variance(params: ProtocolParams, ch: ChannelModel) -> float:
    """Variance of Bob's raw homodyne outcome, ``tau * V_M + V_N``."""
    return ch.tau * params.v_m + noise_variance(params, ch)


def transmit(x_a, ch: ChannelModel, noise_seed=None) -> np.ndarray:
    """Send quadrature values through the channel.

    ``x_a`` is the quadrature leaving Alice (modulation plus source noise).
    ``noise_seed`` is either an integer seed or a ``numpy.random.Generator``.
    """
    x_a = np.asarray(x_a, dtype=float)
    rng = noise_seed if isinstance(noise_seed, np.random.Generator) else substream(noise_seed or 0)
    var = (1.0 - ch.tau) + ch.v_eps
    out = math.sqrt(ch.tau) * x_a
    if var > 0:
        out = out + rng.standard_normal(x_a.shape) * math.sqrt(var)
    return out


def discretize(x, disc: Discretization) -> tuple[np.ndarray, int]:
    """Map values to bin indices and count the values outside ``(-alpha, alpha]``."""
    x = np.asarray(x, dtype=float)
    k = bin_index(x, disc.alpha, disc.delta)
    outside = int(np.count_nonzero((x <= -disc.alpha) | (x > disc.alpha)))
    return k, outside


@dataclass
class Batch:
    """Paired quadrature records: ``m`` (single) or ``m1``/``m2`` (double) with ``b``."""

    b: np.ndarray
    m: np.ndarray | None = None
    m1: np.ndarray | None = None
    m2: np.ndarray | None = None

    @property
    def mode(self) -> str:
        return DOUBLE if self.m2 is not None else "single"

    def columns(self) -> dict[str, np.ndarray]:
        if self.mode == DOUBLE:
            return {"m1": self.m1, "m2": self.m2, "b": self.b}
        return {"m": self.m, "b": self.b}

    def __len__(self):
        return len(self.b)


def write_batch_csv(batch: Batch, path: str | Path) -> None:
    """Write a batch with a header row and one column per variable."""
    cols = batch.columns()
    names = list(cols)
    data = np.column_stack([cols[n] for n in names])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(names) + "\n")
        for row in data:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


class BatchFormatError(ValueError):
    pass


def read_batch_csv(path: str | Path, mode: str | None = None) -> Batch:
    """Read a batch written by :func:`write_batch_csv` or an external tool.

    Accepted headers are ``m,b`` and ``m1,m2,b`` (any column order). If
    ``mode`` is given it must agree with the columns.
    """
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip().lower() for h in next(reader)]
    except StopIteration:
        raise BatchFormatError(f"{path}: empty file") from None
    if sorted(header) == ["b", "m"]:
        file_mode = "single"
    elif sorted(header) == ["b", "m1", "m2"]:
        file_mode = DOUBLE
    else:
        raise BatchFormatError(f"{path}: expected columns (m, b) or (m1, m2, b), got {header}")
    if mode is not None and mode != file_mode:
        raise BatchFormatError(
            f"{path}: {len(header)}-column file holds {file_mode}-mode data but mode={mode} was requested"
        )
    rows, errors = [], []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            errors.append(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
            continue
        try:
            vals = [float(c) for c in row]
        except ValueError:
            errors.append(f"line {lineno}: non-numeric value in {row}")
            continue
        if not all(math.isfinite(v) for v in vals):
            errors.append(f"line {lineno}: non-finite value in {row}")
            continue
        rows.append(vals)
    if errors:
        raise BatchFormatError(f"{path}: " + "; ".join(errors[:20]))
    if not rows:
        raise BatchFormatError(f"{path}: no data rows")
    arr = np.asarray(rows, dtype=float)
    cols = {name: arr[:, i] for i, name in enumerate(header)}
    if file_mode == DOUBLE:
        return Batch(b=cols["b"], m1=cols["m1"], m2=cols["m2"])
    return Batch(b=cols["b"], m=cols["m"])
