"""Core model types: parameters, market states, ranking and parameter checks.

The market consists of ``d`` ranks. Each rank ``k`` carries a growth rate
``a[k]`` and a variance parameter ``sigma2[k]``; the market rate of return is
always the sum of the growth rates and is never stored independently. All
types here are immutable values and all operations are pure functions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError

# Weight vectors are renormalized whenever they drift from the simplex by no
# more than RENORM_TOL; a deviation above SUM_ERROR_TOL indicates a logic bug
# upstream and is rejected.
RENORM_TOL = 1e-12
SUM_ERROR_TOL = 1e-9


def as_weight_vector(x, renormalize: bool = True) -> np.ndarray:
    """Validate ``x`` as an interior simplex vector and return a float copy.

    Entries must be finite and strictly positive, and the sum must be within
    ``SUM_ERROR_TOL`` of one. With ``renormalize`` the vector is divided by
    its sum so downstream code can rely on an exact unit sum.
    """
    x = np.asarray(x, dtype=float).copy()
    if x.ndim != 1 or x.size < 1:
        raise InvalidInputError("weight vector must be one-dimensional and non-empty")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("weight vector contains non-finite entries")
    if np.any(x <= 0.0):
        raise InvalidInputError("weight vector must be strictly positive (interior of the simplex)")
    s = float(x.sum())
    if abs(s - 1.0) > SUM_ERROR_TOL:
        raise InvalidInputError(f"weight vector sums to {s!r}, further from 1 than {SUM_ERROR_TOL}")
    if renormalize:
        x /= s
    return x


@dataclass(frozen=True)
class ModelParams:
    """Per-rank growth and variance parameters.

    Attributes:
        d: number of ranks (>= 2).
        a: length-d growth rates, units 1/year. ``a[0]`` belongs to rank 1.
        sigma2: length-d variance parameters, units 1/year, all positive.
    """

    d: int
    a: np.ndarray
    sigma2: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        sigma2 = np.asarray(self.sigma2, dtype=float)
        a.setflags(write=False)
        sigma2.setflags(write=False)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "sigma2", sigma2)
        if self.d < 2:
            raise InvalidInputError("d must be at least 2")
        if a.shape != (self.d,) or sigma2.shape != (self.d,):
            raise InvalidInputError("a and sigma2 must both have length d")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(sigma2))):
            raise InvalidInputError("parameters must be finite")
        if np.any(sigma2 <= 0.0):
            raise InvalidInputError("all variance parameters must be strictly positive")

    @property
    def lam(self) -> float:
        """Market rate of return: the exact sum of the growth rates."""
        return float(np.sum(self.a))

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(self.sigma2)

    def to_json(self) -> str:
        return json.dumps(
            {"d": self.d, "a": self.a.tolist(), "sigma2": self.sigma2.tolist()},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "ModelParams":
        obj = json.loads(text)
        try:
            return cls(d=int(obj["d"]), a=obj["a"], sigma2=obj["sigma2"])
        except KeyError as exc:
            raise InvalidInputError(f"parameter JSON is missing key {exc}") from exc


@dataclass(frozen=True)
class MarketState:
    """Market weights and log total capitalization at one instant."""

    t: float
    x: np.ndarray
    log_total_cap: float = 0.0

    def __post_init__(self):
        x = as_weight_vector(self.x)
        x.setflags(write=False)
        object.__setattr__(self, "x", x)

    @property
    def d(self) -> int:
        return self.x.size

    def capitalizations(self) -> np.ndarray:
        return self.x * np.exp(self.log_total_cap)


@dataclass(frozen=True)
class RankedView:
    """Descending order statistics of a weight vector with both permutations.

    ``name_of_rank[k]`` is the index (name) occupying rank ``k`` and
    ``rank_of_name[i]`` is the rank of name ``i``; both are 0-based
    internally. Ties award the better (smaller) rank to the smaller index.
    """

    ranked: np.ndarray
    name_of_rank: np.ndarray
    rank_of_name: np.ndarray


@dataclass(frozen=True)
class FellerReport:
    """Tail-sum growth margins against half the tail-max variance.

    ``margins[j]`` corresponds to rank k = j + 2: the sum a_k + ... + a_d
    minus max(sigma2_k, ..., sigma2_d) / 2. The boundary of the simplex is
    unattainable when every margin is nonnegative.
    """

    margins: np.ndarray
    satisfied: bool = field(default=False)

    def __post_init__(self):
        object.__setattr__(self, "satisfied", bool(np.all(self.margins >= 0.0)))


def rank_names(x) -> RankedView:
    """Sort a weight vector in descending order, tracking the permutation.

    Stable under ties: among equal weights the smaller index receives the
    higher (numerically smaller) rank.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size < 2:
        raise InvalidInputError("expected a vector with at least two entries")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("weight vector contains non-finite entries")
    name_of_rank = np.argsort(-x, kind="stable")
    rank_of_name = np.empty_like(name_of_rank)
    rank_of_name[name_of_rank] = np.arange(x.size)
    return RankedView(ranked=x[name_of_rank], name_of_rank=name_of_rank, rank_of_name=rank_of_name)


def feller_check(params: ModelParams) -> FellerReport:
    """Evaluate the tail-sum condition guaranteeing weights never hit zero."""
    a, sigma2 = params.a, params.sigma2
    tail_sum = np.cumsum(a[::-1])[::-1]  # tail_sum[k] = a_k + ... + a_d
    tail_max = np.maximum.accumulate(sigma2[::-1])[::-1]
    margins = tail_sum[1:] - 0.5 * tail_max[1:]
    return FellerReport(margins=margins)


def market_spot_variance(x, params: ModelParams) -> float:
    """Instantaneous variance rate of the total market at weights ``x``.

    Equals the rank-weighted average of the variance parameters, so it is
    invariant under permutations of ``x``.
    """
    x = as_weight_vector(x)
    if x.size != params.d:
        raise InvalidInputError("weight vector length does not match params.d")
    ranked = np.sort(x)[::-1]
    return float(np.sum(params.sigma2 * ranked))
