from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from core import PowerFlowLabError
from core.grid_model import DimensionMismatch, apply_topology, build_nodal_matrix


class SingularSystem(PowerFlowLabError):
    """Reduced nodal matrix could not be factorized"""


@dataclass(frozen=True)
class Injection:
    """Active power per generator and per load, in p.u."""

    p_prod: np.ndarray
    p_load: np.ndarray

    def __post_init__(self):
        p_prod = np.array(self.p_prod, dtype=float)
        p_load = np.array(self.p_load, dtype=float)
        if not (np.all(np.isfinite(p_prod)) and np.all(np.isfinite(p_load))):
            raise ValueError("injections must be finite")
        p_prod.setflags(write=False)
        p_load.setflags(write=False)
        object.__setattr__(self, "p_prod", p_prod)
        object.__setattr__(self, "p_load", p_load)

    def check(self, grid):
        if len(self.p_prod) != grid.n_generators or len(self.p_load) != grid.n_loads:
            raise DimensionMismatch(
                f"injection has {len(self.p_prod)} generators / {len(self.p_load)} loads, grid "
                f"'{grid.name}' has {grid.n_generators} / {grid.n_loads}")

    @property
    def total_production(self):
        return float(self.p_prod.sum())

    @property
    def total_load(self):
        return float(self.p_load.sum())

    @classmethod
    def nominal(cls, grid):
        return cls(grid.nominal_production, grid.nominal_load)


@dataclass(frozen=True)
class PhasorSolution:
    theta: np.ndarray
    slack_bus: int

    @property
    def n_buses(self):
        return len(self.theta)


@dataclass(frozen=True)
class LineFlows:
    p_or: np.ndarray
    p_ex: np.ndarray

    @property
    def losses(self):
        return self.p_or + self.p_ex


def nodal_injections(bg, grid, inj):
    """Net injection per bus; the slack entry is overwritten so the vector sums to zero"""
    inj.check(grid)
    p = np.zeros(bg.n_buses)
    gen_on = bg.generator_buses >= 0
    load_on = bg.load_buses >= 0
    np.add.at(p, bg.generator_buses[gen_on], inj.p_prod[gen_on])
    np.add.at(p, bg.load_buses[load_on], -inj.p_load[load_on])
    others = np.arange(bg.n_buses) != bg.slack_bus
    p[bg.slack_bus] = -p[others].sum()
    return p


def solve_dc(Y, p, slack):
    """Exact DC solve with theta[slack] pinned to 0 (Cholesky on the reduced system)"""
    p = np.asarray(p, dtype=float)
    if len(p) != Y.dim:
        raise DimensionMismatch(f"injection vector has {len(p)} entries, matrix has dim {Y.dim}")
    theta = np.zeros(Y.dim)
    if Y.dim == 1:
        return PhasorSolution(theta, slack)
    reduced, keep = Y.reduced(slack)
    try:
        factor = cho_factor(reduced, lower=True, check_finite=True)
    except LinAlgError as e:
        raise SingularSystem(f"reduced nodal matrix of dim {len(keep)} is not positive definite") from e
    theta[keep] = cho_solve(factor, p[keep])
    theta[slack] = 0.0
    return PhasorSolution(theta, slack)


def line_flows(theta, bg):
    """p_or = b (theta_or - theta_ex), p_ex = -p_or; disconnected lines carry nothing"""
    values = theta.theta if isinstance(theta, PhasorSolution) else np.asarray(theta, dtype=float)
    if len(values) != bg.n_buses:
        raise DimensionMismatch(f"theta has {len(values)} entries, bus graph has {bg.n_buses} buses")
    theta_or, theta_ex = bg.line_angles(values)
    p_or = np.where(bg.line_status, bg.line_susceptance * (theta_or - theta_ex), 0.0)
    p_ex = np.where(bg.line_status, bg.line_susceptance * (theta_ex - theta_or), 0.0)
    return LineFlows(p_or, p_ex)


def line_flows_from_angles(theta_or, theta_ex, line_status, susceptance):
    """Flows straight from per-line extremity angles (line-level predictors)"""
    status = np.asarray(line_status, dtype=bool)
    delta = np.asarray(theta_or) - np.asarray(theta_ex)
    p_or = np.where(status, susceptance * delta, 0.0)
    p_ex = np.where(status, -susceptance * delta, 0.0)
    return LineFlows(p_or, p_ex)


def solve_sample(grid, tau, inj):
    """apply_topology -> nodal matrix -> injections -> exact solve -> flows"""
    bg = apply_topology(grid, tau)
    Y = build_nodal_matrix(bg)
    p = nodal_injections(bg, grid, inj)
    solution = solve_dc(Y, p, bg.slack_bus)
    return bg, Y, p, solution, line_flows(solution, bg)
