"""Shared fixtures: ground-truth models and their simulated panels.

The two expensive panels are session-scoped; unit tests and the acceptance
suite share them. `separated` has well-spread stationary weights (rank
switches are rare), `collision` has near-symmetric growth so ranks swap
constantly.
"""

import numpy as np
import pytest

from rankvol.model import ModelParams
from rankvol.panel import panel_from_trajectory, split_panel
from rankvol.simulate import SimConfig, simulate_path

SEPARATED_SEED = 2024
COLLISION_SEED = 77


def make_separated_params(d: int = 10, lam: float = 1.0) -> ModelParams:
    w = 0.62 ** np.arange(d)
    w /= w.sum()
    return ModelParams(d=d, a=lam * w, sigma2=0.025 * 0.8 ** np.arange(d))


def make_collision_params(d: int = 10) -> ModelParams:
    return ModelParams(d=d, a=np.full(d, 0.5), sigma2=np.linspace(0.20, 0.11, d))


def make_small_params() -> ModelParams:
    return ModelParams(
        d=5,
        a=np.array([0.5, 0.25, 0.12, 0.08, 0.05]),
        sigma2=np.array([0.03, 0.025, 0.02, 0.015, 0.01]),
    )


@pytest.fixture(scope="session")
def separated_params():
    return make_separated_params()


@pytest.fixture(scope="session")
def separated_panel(separated_params):
    """50-year daily panel from the separated model, after a 10y burn-in."""
    traj = simulate_path(
        separated_params,
        np.full(separated_params.d, 1.0 / separated_params.d),
        SimConfig(horizon=60.0, seed=SEPARATED_SEED),
    )
    _, panel = split_panel(panel_from_trajectory(traj), 10.0)
    return panel


@pytest.fixture(scope="session")
def collision_params():
    return make_collision_params()


@pytest.fixture(scope="session")
def collision_panel(collision_params):
    """20-year daily panel with heavy rank turnover, after a 5y burn-in."""
    traj = simulate_path(
        collision_params,
        np.full(collision_params.d, 1.0 / collision_params.d),
        SimConfig(horizon=25.0, seed=COLLISION_SEED),
    )
    _, panel = split_panel(panel_from_trajectory(traj), 5.0)
    return panel


@pytest.fixture(scope="session")
def small_params():
    return make_small_params()


@pytest.fixture(scope="session")
def small_panel(small_params):
    """Short (8y) d=5 panel for cheap estimator tests."""
    traj = simulate_path(
        small_params,
        np.array([0.45, 0.25, 0.15, 0.10, 0.05]),
        SimConfig(horizon=8.0, seed=5),
    )
    return panel_from_trajectory(traj)
