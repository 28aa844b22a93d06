"""Rank-based estimators computed from capitalization panels.

All estimators work on any :class:`~rankvol.panel.PanelData`, historical or
simulated, and use the panel's recorded observation spacing. Increments that
reference a name absent on the following date are dropped together with
their share of elapsed time (the default delisting policy); strict mode
raises instead.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    DataQualityError,
    DataQualityWarning,
    InconsistentInputsError,
    InvalidInputError,
)
from .panel import PanelData

SKIP_WARN_FRACTION = 0.20
DEFAULT_SMOOTHING_WINDOW = 15
A_HAT_IDENTITY_TOL = 1e-12


@dataclass
class EstimateSet:
    """All panel-driven estimates with their provenance.

    ``a`` is populated only once a market rate of return has been chosen;
    ``lambda_hat`` / ``lambda_hat_log`` are the data-implied market growth
    estimates and are carried for reference regardless of that choice.
    """

    sigma2_raw: np.ndarray
    sigma2: np.ndarray
    phibar: np.ndarray
    phi: np.ndarray
    mu: np.ndarray
    rho: np.ndarray
    lambda_hat: float
    lambda_hat_log: float
    a: Optional[np.ndarray] = None
    metadata: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.sigma2.size


def _gathered_next_caps(panel: PanelData) -> tuple[np.ndarray, np.ndarray]:
    """Caps at date i+1 of the names ranked on date i; NaN where absent."""
    pos = panel.align_next_positions()
    valid = pos >= 0
    gathered = np.take_along_axis(panel.caps[1:], np.where(valid, pos, 0), axis=1)
    return np.where(valid, gathered, np.nan), valid


def skipped_increments(panel: PanelData) -> np.ndarray:
    """Per-rank count of increments dropped by the delisting policy."""
    _, valid = _gathered_next_caps(panel)
    return (~valid).sum(axis=0)


def name_change_fraction(panel: PanelData) -> np.ndarray:
    """Per-rank fraction of increments on which the rank changes occupant."""
    if panel.n_dates < 2:
        raise InvalidInputError("panel needs at least two dates")
    return (panel.ids[1:] != panel.ids[:-1]).mean(axis=0)


def uniform_smooth(values: np.ndarray, window: int) -> np.ndarray:
    """Centered moving average whose window shrinks symmetrically at edges."""
    if window < 1 or window % 2 == 0:
        raise InvalidInputError("smoothing window must be a positive odd integer")
    values = np.asarray(values, dtype=float)
    n = values.size
    out = np.empty(n)
    half_max = (window - 1) // 2
    for j in range(n):
        half = min(j, n - 1 - j, half_max)
        out[j] = values[j - half : j + half + 1].mean()
    return out


def sigma2_hat(
    panel: PanelData,
    smoothing_window: int = DEFAULT_SMOOTHING_WINDOW,
    strict: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-rank variance estimates: squared log-cap increments of the name
    occupying each rank, normalized by the inverse-weight clock.

    Returns the raw vector and its uniform smoothing (default window 15).
    """
    if panel.n_dates < 2:
        raise InvalidInputError("panel needs at least two dates")
    next_caps, valid = _gathered_next_caps(panel)
    if strict and not valid.all():
        raise DataQualityError("delisted names in volatility increments (strict mode)")
    increments = np.where(valid, np.log(np.where(valid, next_caps, 1.0)) - np.log(panel.caps[:-1]), 0.0)
    weights = panel.weights()[:-1]
    dt = panel.dt[:, None]
    numerator = np.sum(increments**2, axis=0)
    denominator = np.sum(np.where(valid, dt / weights, 0.0), axis=0)
    # a rank whose every increment was skipped has no information: NaN
    raw = np.divide(
        numerator, denominator, out=np.full(panel.d, np.nan), where=denominator > 0
    )
    skip_frac = (~valid).mean(axis=0)
    bad = np.nonzero(skip_frac > SKIP_WARN_FRACTION)[0]
    if bad.size:
        warnings.warn(
            f"more than {SKIP_WARN_FRACTION:.0%} of increments skipped at ranks "
            f"{(bad + 1).tolist()}",
            DataQualityWarning,
        )
    return raw, uniform_smooth(raw, smoothing_window)


def sigma2_hat_ranked_variant(panel: PanelData) -> np.ndarray:
    """Variance estimator built from ranked (not name-tracked) increments.

    Downward biased whenever ranks switch occupants between observations;
    provided for the bias comparison only.
    """
    if panel.n_dates < 2:
        raise InvalidInputError("panel needs at least two dates")
    increments = np.diff(np.log(panel.caps), axis=0)
    weights = panel.weights()[:-1]
    dt = panel.dt[:, None]
    numerator = np.sum(increments**2, axis=0)
    denominator = np.sum(dt / weights, axis=0)
    return numerator / denominator


def phibar_hat(panel: PanelData, strict: bool = False) -> np.ndarray:
    """Cumulative collision rates from the leakage of top-k tracking.

    For each k the summand weights the log ratio between the new top-k
    capitalization and the capitalization the previous top-k names command
    on the new date. Entry ``d - 1`` is zero by construction.
    """
    if panel.n_dates < 2:
        raise InvalidInputError("panel needs at least two dates")
    next_caps, valid = _gathered_next_caps(panel)
    if strict and not valid.all():
        raise DataQualityError("delisted names in collision increments (strict mode)")
    weights = panel.weights()
    cum_weight = np.cumsum(weights[:-1], axis=1)
    cum_new = np.cumsum(panel.caps[1:], axis=1)
    cum_old = np.cumsum(next_caps, axis=1)  # NaN beyond the first missing name
    terms = cum_weight * np.log(cum_new / cum_old)
    ok = np.isfinite(terms)
    elapsed = np.sum(np.where(ok, panel.dt[:, None], 0.0), axis=0)
    phibar = np.where(elapsed > 0, np.nansum(np.where(ok, terms, np.nan), axis=0), 0.0)
    phibar = phibar / np.where(elapsed > 0, elapsed, 1.0)
    phibar[-1] = 0.0
    return phibar


def phi_hat(phibar: np.ndarray) -> np.ndarray:
    """Per-rank collision rates by successive differences of the cumulative
    rates; sums to (minus) the final cumulative entry, which must be zero."""
    phibar = np.asarray(phibar, dtype=float)
    if phibar.ndim != 1 or phibar.size < 2:
        raise InvalidInputError("phibar must be a vector of length >= 2")
    if phibar[-1] != 0.0:
        raise InvalidInputError("phibar must end at exactly zero")
    return np.diff(phibar, prepend=0.0)


def moment_hats(panel: PanelData, sigma2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Time averages of the ranked weights and of their product with the
    market spot variance, over all observation dates except the last."""
    sigma2 = np.asarray(sigma2, dtype=float)
    if sigma2.shape != (panel.d,):
        raise InvalidInputError("sigma2 must have length d")
    weights = panel.weights()[:-1]
    mu = weights.mean(axis=0)
    spot = weights @ sigma2
    rho = (weights * spot[:, None]).mean(axis=0)
    return mu, rho


def lambda_hat(panel: PanelData) -> float:
    """Arithmetic-return estimate of the market rate of return."""
    if panel.n_dates < 2:
        raise InvalidInputError("panel needs at least two dates")
    total = panel.total_caps()
    returns = np.diff(total) / total[:-1]
    return float(returns.sum() / panel.span)


def lambda_hat_log(panel: PanelData) -> float:
    """Log-growth estimate of the market rate of return."""
    if panel.n_dates < 2:
        raise InvalidInputError("panel needs at least two dates")
    total = panel.total_caps()
    return float(np.log(total[-1] / total[0]) / panel.span)


def a_hat(
    mu: np.ndarray,
    rho: np.ndarray,
    phi: np.ndarray,
    sigma2: np.ndarray,
    lam: float,
) -> np.ndarray:
    """Growth parameters implied by the stationarity relation.

    The inputs must come from one panel: the estimate sums to ``lam``
    exactly through the simplex, spot-variance and collision identities, and
    a violation beyond tolerance indicates mixed provenance.
    """
    mu, rho, phi, sigma2 = (np.asarray(v, dtype=float) for v in (mu, rho, phi, sigma2))
    if not (mu.shape == rho.shape == phi.shape == sigma2.shape):
        raise InvalidInputError("mu, rho, phi and sigma2 must share one length")
    a = lam * mu + sigma2 * mu - rho - phi
    scale = max(1.0, abs(lam))
    if abs(float(a.sum()) - lam) > A_HAT_IDENTITY_TOL * scale:
        raise InconsistentInputsError(
            f"sum of growth parameters {a.sum()!r} differs from lambda {lam!r}; "
            "inputs do not come from a common panel"
        )
    return a


def leakage_check(panel: PanelData, k: int) -> tuple[float, float]:
    """Compare realized top-k tracking leakage against the collision rate.

    ``lhs`` is the relative-wealth drift of the discrete buy-and-hold
    implementation of the top-k tracking strategy net of the change in the
    top-k weight sum itself; ``rhs`` is minus the cumulative collision rate
    at k. With no rank turnover both vanish; on long panels they agree up to
    discretization and the O(1/T) endpoint term.
    """
    if not (1 <= k < panel.d):
        raise InvalidInputError("k must satisfy 1 <= k < d")
    next_caps, _ = _gathered_next_caps(panel)
    weights = panel.weights()
    totals = panel.total_caps()
    col = k - 1
    cum_new_w = np.cumsum(weights[1:], axis=1)[:, col]
    cum_old_w = np.cumsum(next_caps / totals[1:, None], axis=1)[:, col]
    ok = np.isfinite(cum_old_w)
    elapsed = float(panel.dt[ok].sum())
    leakage = float(np.nansum(np.where(ok, cum_new_w - cum_old_w, np.nan)))
    lhs = -leakage / elapsed if elapsed > 0 else 0.0
    rhs = -float(phibar_hat(panel)[col])
    return lhs, rhs
