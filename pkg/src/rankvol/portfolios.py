"""Portfolio rules, wealth dynamics and functional generation diagnostics.

Rules are pure functions of the current weight vector (growth-optimal rules
additionally read the model parameters and are evaluated in ranked
coordinates, then mapped back to names). Wealth paths follow the discrete
fully-invested recursion; the relative path always divides by the market
portfolio run through the same recursion, so the market's relative log
wealth is identically zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (
    BankruptcyError,
    DegenerateHorizonError,
    InvalidInputError,
    RankVolError,
)
from .model import ModelParams, as_weight_vector
from .simulate import Trajectory

GROWTH_SUM_TOL = 1e-8

_KINDS = ("market", "diversity", "growth_closed", "growth_open", "large_cap")


@dataclass(frozen=True)
class PortfolioRule:
    """A named allocation rule with its per-kind parameters."""

    kind: str
    p: Optional[float] = None
    n_open: Optional[int] = None
    k_top: Optional[int] = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise InvalidInputError(f"unknown portfolio kind {self.kind!r}")
        if self.kind == "diversity":
            if self.p is None or not (0.0 < self.p < 1.0):
                raise InvalidInputError("diversity exponent p must lie in (0, 1)")
        if self.kind == "growth_open":
            if self.n_open is None or self.n_open < 1:
                raise InvalidInputError("open-market size N must be a positive integer")
        if self.kind == "large_cap":
            if self.k_top is None or self.k_top < 1:
                raise InvalidInputError("large-cap cutoff k must be a positive integer")

    @staticmethod
    def market() -> "PortfolioRule":
        return PortfolioRule("market")

    @staticmethod
    def diversity(p: float = 0.8) -> "PortfolioRule":
        return PortfolioRule("diversity", p=p)

    @staticmethod
    def growth_closed() -> "PortfolioRule":
        return PortfolioRule("growth_closed")

    @staticmethod
    def growth_open(n: int) -> "PortfolioRule":
        return PortfolioRule("growth_open", n_open=n)

    @staticmethod
    def large_cap(k: int) -> "PortfolioRule":
        return PortfolioRule("large_cap", k_top=k)

    def to_json(self) -> str:
        obj: dict = {"kind": self.kind}
        if self.kind == "diversity":
            obj["p"] = self.p
        elif self.kind == "growth_open":
            obj["N"] = self.n_open
        elif self.kind == "large_cap":
            obj["k"] = self.k_top
        return json.dumps(obj, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PortfolioRule":
        obj = json.loads(text)
        kind = obj.get("kind")
        if kind == "diversity":
            return cls.diversity(float(obj["p"]))
        if kind == "growth_open":
            return cls.growth_open(int(obj["N"]))
        if kind == "large_cap":
            return cls.large_cap(int(obj["k"]))
        if kind in ("market", "growth_closed"):
            return cls(kind)
        raise InvalidInputError(f"unknown portfolio kind {kind!r}")


@dataclass
class WealthPath:
    """Discretized (relative) wealth along a trajectory."""

    times: np.ndarray
    log_wealth: np.ndarray
    log_relative: np.ndarray
    weights_sampled: Optional[np.ndarray] = None


@dataclass
class FgpDecomposition:
    """Split of relative log wealth into generator change plus drift.

    ``residual`` is the master-formula gap. For rank-based generators the
    drift is reported as that gap itself (the reflection integrals are not
    observable from sampled paths) and the residual is zero by convention,
    recorded in ``convention``.
    """

    times: np.ndarray
    log_g_change: np.ndarray
    gamma: np.ndarray
    residual: np.ndarray
    convention: str


def _validate_matrix(W: np.ndarray) -> np.ndarray:
    W = np.asarray(W, dtype=float)
    if W.ndim == 1:
        W = W[None, :]
    if np.any(W <= 0.0) or not np.all(np.isfinite(W)):
        raise InvalidInputError("weights must be strictly positive and finite (interior states)")
    return W


def _rank_matrix(W: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(-W, axis=1, kind="stable")
    ranked = np.take_along_axis(W, order, axis=1)
    return order, ranked


def _growth_rank_weights(ranked_n: np.ndarray, params: ModelParams, n: int) -> np.ndarray:
    """Closed-form growth-optimal allocation over the top ``n`` ranks."""
    base = params.a[:n] / params.sigma2[:n]
    inv = 1.0 / params.sigma2[:n]
    denom = ranked_n @ inv
    common = float(base.sum()) - 1.0
    return base[None, :] - common * (ranked_n * inv[None, :]) / denom[:, None]


def _weights_matrix(rule: PortfolioRule, W: np.ndarray, params: Optional[ModelParams]) -> np.ndarray:
    W = _validate_matrix(W)
    n_rows, d = W.shape
    if rule.kind == "market":
        out = W.copy()
    elif rule.kind == "diversity":
        powered = W**rule.p
        out = powered / powered.sum(axis=1, keepdims=True)
    elif rule.kind == "large_cap":
        k = rule.k_top
        if not (1 <= k <= d - 1):
            raise InvalidInputError("large-cap cutoff k must lie in [1, d-1]")
        order, ranked = _rank_matrix(W)
        top_sum = ranked[:, :k].sum(axis=1, keepdims=True)
        ranks = np.empty_like(order)
        np.put_along_axis(ranks, order, np.arange(d)[None, :], axis=1)
        out = np.where(ranks < k, W / top_sum, 0.0)
    elif rule.kind in ("growth_closed", "growth_open"):
        if params is None:
            raise InvalidInputError("growth-optimal rules need model parameters")
        if params.d != d:
            raise InvalidInputError("params dimension does not match the weight vector")
        n = d if rule.kind == "growth_closed" else rule.n_open
        if not (1 <= n <= d):
            raise InvalidInputError("open-market size N must lie in [1, d]")
        order, ranked = _rank_matrix(W)
        pi_rank = _growth_rank_weights(ranked[:, :n], params, n)
        out = np.zeros_like(W)
        np.put_along_axis(out, order[:, :n], pi_rank, axis=1)
        sums = out.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > GROWTH_SUM_TOL):
            raise RankVolError(
                "closed-form growth weights deviate from the budget constraint "
                f"by up to {np.abs(sums - 1.0).max():.3e}"
            )
    else:  # pragma: no cover - guarded by PortfolioRule
        raise InvalidInputError(f"unknown portfolio kind {rule.kind!r}")
    return out / out.sum(axis=1, keepdims=True)


def portfolio_weights(rule: PortfolioRule, x, params: Optional[ModelParams] = None) -> np.ndarray:
    """Allocation of the rule at weight vector ``x`` (sums to one exactly)."""
    x = as_weight_vector(x, renormalize=False)
    return _weights_matrix(rule, x, params)[0]


def growth_optimal_qp_oracle(x, params: ModelParams, n_open: Optional[int] = None) -> np.ndarray:
    """Growth-optimal allocation by direct solution of the one-constraint
    quadratic program (constraint elimination plus a linear solve).

    Independent of the closed-form expressions; intended as their oracle. A
    single investable rank forces the whole budget onto it.
    """
    x = as_weight_vector(x, renormalize=False)
    d = x.size
    n = d if n_open is None else n_open
    if not (1 <= n <= d):
        raise InvalidInputError("open-market size N must lie in [1, d]")
    order = np.argsort(-x, kind="stable")
    out = np.zeros(d)
    if n == 1:
        out[order[0]] = 1.0
        return out
    y = x[order[:n]]
    alpha = params.a[:n] / y
    beta = params.sigma2[:n] / y
    A = np.diag(beta[:-1]) + beta[-1]
    b = alpha[:-1] - alpha[-1] + beta[-1]
    head = np.linalg.solve(A, b)
    pi_rank = np.concatenate([head, [1.0 - head.sum()]])
    out[order[:n]] = pi_rank
    return out


def diversity_measure(x, p: float) -> float:
    """Generating function of the diversity rule: the p-norm of the weights.

    At least one on the simplex, with equality only in the single-asset
    limit.
    """
    x = as_weight_vector(x, renormalize=False)
    if not (0.0 < p < 1.0):
        raise InvalidInputError("p must lie in (0, 1)")
    return float(np.sum(x**p) ** (1.0 / p))


def excess_growth_rate(x, sigma2, p: float) -> float:
    """Instantaneous drift rate earned by the diversity rule's rebalancing."""
    x = as_weight_vector(x, renormalize=False)
    sigma2 = np.asarray(sigma2, dtype=float)
    if sigma2.shape != x.shape:
        raise InvalidInputError("sigma2 must match the weight vector length")
    if not (0.0 < p < 1.0):
        raise InvalidInputError("p must lie in (0, 1)")
    ranked = np.sort(x)[::-1]
    u = float(np.sum(ranked**p))
    term1 = float(np.sum(ranked ** (p - 1.0) * sigma2)) / (2.0 * u)
    term2 = float(np.sum(ranked ** (2.0 * p - 1.0) * sigma2)) / (2.0 * u * u)
    return term1 - term2


def excess_growth_lower_bound(sigma2, p: float) -> float:
    """Uniform lower bound on the excess growth rate over the simplex."""
    sigma2 = np.asarray(sigma2, dtype=float)
    d = sigma2.size
    tail = float(sigma2.sum() - sigma2.max())
    return tail / (2.0 * d ** (1.0 - p))


def t_star(x0, p: float, sigma2) -> float:
    """Horizon beyond which the diversity rule beats the market a.s.

    Uses the uniform drift bound together with the initial diversity level;
    degenerate when all but the largest variance parameter vanish.
    """
    x0 = as_weight_vector(x0, renormalize=False)
    sigma2 = np.asarray(sigma2, dtype=float)
    if sigma2.shape != x0.shape:
        raise InvalidInputError("sigma2 must match the weight vector length")
    if not (0.0 < p < 1.0):
        raise InvalidInputError("p must lie in (0, 1)")
    d = x0.size
    tail = float(sigma2.sum() - sigma2.max())
    if tail <= 0.0:
        raise DegenerateHorizonError("all variance mass sits on one rank; horizon undefined")
    return 2.0 * np.log(diversity_measure(x0, p)) * d ** (1.0 - p) / ((1.0 - p) * tail)


def _gross_returns(traj: Trajectory) -> np.ndarray:
    """Per-step gross return of every asset, from weights and log total cap."""
    W = traj.weights
    dlog = np.diff(traj.log_total_cap)
    return (W[1:] / W[:-1]) * np.exp(dlog)[:, None]


def _log_wealth_from_weights(pis: np.ndarray, gross: np.ndarray, method: str) -> np.ndarray:
    if method == "simple":
        factors = 1.0 + np.sum(pis * (gross - 1.0), axis=1)
        bad = np.nonzero(factors <= 0.0)[0]
        if bad.size:
            raise BankruptcyError(
                f"portfolio return reached -100% at step {int(bad[0]) + 1}",
                step_index=int(bad[0]) + 1,
            )
        steps = np.log(factors)
    elif method == "log":
        steps = np.sum(pis * np.log(gross), axis=1)
    else:
        raise InvalidInputError("method must be 'simple' or 'log'")
    return np.concatenate([[0.0], np.cumsum(steps)])


def wealth_path(
    traj: Trajectory,
    rule: PortfolioRule,
    params: Optional[ModelParams] = None,
    method: str = "simple",
    record_weights: bool = False,
) -> WealthPath:
    """Run the discrete wealth recursion of ``rule`` along a trajectory.

    ``method='simple'`` compounds arithmetic per-step returns and matches
    the fully-invested wealth dynamics; ``method='log'`` compounds
    weight-averaged log returns instead, a different discretization that
    cannot go bankrupt and is meant for heavily leveraged rules.
    """
    if traj.n_samples < 2:
        raise InvalidInputError("trajectory needs at least two samples")
    gross = _gross_returns(traj)
    pis = _weights_matrix(rule, traj.weights[:-1], params)
    log_wealth = _log_wealth_from_weights(pis, gross, method)
    bench = _weights_matrix(PortfolioRule.market(), traj.weights[:-1], None)
    log_bench = _log_wealth_from_weights(bench, gross, method)
    return WealthPath(
        times=traj.times.copy(),
        log_wealth=log_wealth,
        log_relative=log_wealth - log_bench,
        weights_sampled=pis if record_weights else None,
    )


def _log_generator(rule: PortfolioRule, W: np.ndarray, params: Optional[ModelParams]) -> np.ndarray:
    if rule.kind == "diversity":
        return np.log(np.sum(W**rule.p, axis=1)) / rule.p
    if rule.kind in ("growth_closed", "growth_open"):
        if params is None:
            raise InvalidInputError("growth generators need model parameters")
        d = W.shape[1]
        n = d if rule.kind == "growth_closed" else rule.n_open
        _, ranked = _rank_matrix(W)
        base = params.a[:n] / params.sigma2[:n]
        inv = 1.0 / params.sigma2[:n]
        return np.log(ranked[:, :n]) @ base - (base.sum() - 1.0) * np.log(ranked[:, :n] @ inv)
    raise InvalidInputError(f"no generator for portfolio kind {rule.kind!r}")


def fgp_decompose(
    traj: Trajectory,
    rule: PortfolioRule,
    params: Optional[ModelParams] = None,
    method: str = "simple",
) -> FgpDecomposition:
    """Decompose relative log wealth into generator change plus drift.

    For the smooth diversity generator the drift integrates the realized
    quadratic covariations of the sampled weights (no reflection term). For
    the rank-based growth generators the drift is defined as the
    master-formula residual itself and the residual field is exactly zero,
    with the convention recorded.
    """
    W = _validate_matrix(traj.weights)
    log_v = wealth_path(traj, rule, params, method=method).log_relative
    log_g = _log_generator(rule, W, params)
    log_g_change = log_g - log_g[0]
    if rule.kind == "diversity":
        p = rule.p
        x = W[:-1]
        dx = np.diff(W, axis=0)
        u = np.sum(x**p, axis=1)
        s1 = np.sum(x ** (p - 2.0) * dx**2, axis=1)
        s2 = np.sum(x ** (p - 1.0) * dx, axis=1) ** 2
        d_gamma = 0.5 * (1.0 - p) * (s1 / u - s2 / (u * u))
        gamma = np.concatenate([[0.0], np.cumsum(d_gamma)])
        residual = log_v - log_g_change - gamma
        convention = "case1_quadratic_covariation"
    else:
        gamma = log_v - log_g_change
        residual = np.zeros_like(log_v)
        convention = "case2_master_formula_residual"
    return FgpDecomposition(
        times=traj.times.copy(),
        log_g_change=log_g_change,
        gamma=gamma,
        residual=residual,
        convention=convention,
    )
