"""Synthetic load profiles standing in for utility historical data.

A bundled two-peak residential daily shape (normalized to mean 1) scales
the feeder base loads into hourly means.  Within each hour the truth
deviates from the mean by independent relative noise per (bus, phase) and
step; the hourly means themselves are the pseudo-measurement values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .measurements import PseudoMeasurements
from .network import NetworkModel

STEPS_PER_HOUR = 4  # 15-minute intervals

# two-peak residential day, normalized to mean 1 below
_RAW_SHAPE = np.array(
    [0.42, 0.38, 0.36, 0.35, 0.36, 0.40, 0.52, 0.65, 0.72, 0.74, 0.75, 0.76,
     0.77, 0.75, 0.73, 0.74, 0.80, 0.92, 1.00, 0.98, 0.90, 0.76, 0.60, 0.48]
)
DAILY_SHAPE = _RAW_SHAPE / _RAW_SHAPE.mean()

_NS_LOAD = 31


@dataclass(frozen=True)
class LoadProfile:
    """Per-step truth injections and hourly pseudo-measurement means."""

    truth: np.ndarray  # complex (horizon, N)
    pseudo_hourly: np.ndarray  # complex (n_hours, N)
    sigma_pseudo: float
    steps_per_hour: int = STEPS_PER_HOUR

    @property
    def horizon(self) -> int:
        return self.truth.shape[0]

    def hour_of_step(self, t: int) -> int:
        return t // self.steps_per_hour

    def pseudo_for_step(self, t: int) -> PseudoMeasurements:
        return PseudoMeasurements(
            s=self.pseudo_hourly[self.hour_of_step(t)], sigma=self.sigma_pseudo
        )


def generate_profiles(
    net: NetworkModel,
    horizon: int,
    sigma_pseudo: float,
    seed,
    *,
    trial: int = 0,
    noise: str = "gaussian",
) -> LoadProfile:
    """Generate a truth series plus hourly pseudo-measurements.

    The hourly mean is base load times the daily shape; truth at each step
    applies independent relative deviation (gaussian by default, lognormal
    with unit mean optionally) to the real and imaginary parts, so the
    zero-injection entries stay exactly zero at all times.
    """
    if horizon < 1:
        raise ConfigError("horizon must be at least 1")
    if noise not in ("gaussian", "lognormal"):
        raise ConfigError(f"unknown load noise model {noise!r}")
    base = net.base_load_vector()
    n = base.shape[0]
    n_hours = (horizon + STEPS_PER_HOUR - 1) // STEPS_PER_HOUR
    pseudo_hourly = np.empty((n_hours, n), dtype=complex)
    for h in range(n_hours):
        pseudo_hourly[h] = base * DAILY_SHAPE[h % 24]

    truth = np.empty((horizon, n), dtype=complex)
    for t in range(horizon):
        mean = pseudo_hourly[t // STEPS_PER_HOUR]
        rng = np.random.default_rng((seed, _NS_LOAD, int(trial), t))
        if noise == "gaussian":
            factors = 1.0 + sigma_pseudo * rng.normal(size=(2, n))
        else:
            sig_ln = np.sqrt(np.log1p(sigma_pseudo**2))
            factors = rng.lognormal(mean=-0.5 * sig_ln**2, sigma=sig_ln, size=(2, n))
        truth[t] = mean.real * factors[0] + 1j * mean.imag * factors[1]
    return LoadProfile(truth=truth, pseudo_hourly=pseudo_hourly, sigma_pseudo=sigma_pseudo)
