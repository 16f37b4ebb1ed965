"""Finite-size key rates for squeezed-state CV-QKD under the entropic uncertainty relation.

The package splits into small modules that mirror the structure of the
security argument:

- :mod:`eurqkd.mathfn` -- scalar kernels (large-deviation function, overlap,
  discretized Gaussian entropy).
- :mod:`eurqkd.params` -- protocol, channel, discretization and security settings.
- :mod:`eurqkd.channel` -- Gaussian channel model, sampling and binning.
- :mod:`eurqkd.bounds` -- smooth min-/max-entropy bounds and smoothing parameters.
- :mod:`eurqkd.estimation` -- maximum-likelihood channel estimators and confidence bounds.
- :mod:`eurqkd.keyrate` -- key length assembly, sweeps and grid optimization.
- :mod:`eurqkd.montecarlo` -- protocol simulation harness.
- :mod:`eurqkd.cli` -- command-line front end.
"""

__version__ = "0.1.0"
