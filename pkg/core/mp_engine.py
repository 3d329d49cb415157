from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from core import PowerFlowLabError
from core.grid_model import NodalMatrix, build_nodal_matrix

# Every function here broadcasts over leading axes: theta/p are (..., n),
# Y is (..., n, n) and slack is a scalar or an (...,) integer array.

# Flat-start Jacobi on IEEE-14 samples needs a few hundred layers typically and
# a few thousand in the worst accepted topologies to reach 1e-6
DEFAULT_LAYERS = 10_000
DEFAULT_LAYERS_LARGE = 40_000


class NotConverged(PowerFlowLabError):
    """Residual still above tolerance when the layer budget ran out"""

    def __init__(self, message, theta, trajectory, residual):
        super().__init__(message)
        self.theta = theta
        self.trajectory = trajectory
        self.residual = residual


@dataclass
class MpConfig:
    n_layers: int = DEFAULT_LAYERS
    damping: float = 1.0
    tol: float = 1e-6
    track_trajectory: bool = True

    def __post_init__(self):
        if int(self.n_layers) < 1:
            raise ValueError(f"n_layers must be >= 1, got {self.n_layers}")
        if not 0.0 < float(self.damping) <= 1.0:
            raise ValueError(f"damping must lie in (0, 1], got {self.damping}")
        if not float(self.tol) > 0.0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        self.n_layers = int(self.n_layers)
        self.damping = float(self.damping)
        self.tol = float(self.tol)


@dataclass
class MpTrajectory:
    max_residual: list = field(default_factory=list)
    mean_residual: list = field(default_factory=list)
    converged: bool = False

    @property
    def n_layers(self):
        return len(self.max_residual)

    def record(self, residual):
        self.max_residual.append(float(np.max(residual)) if residual.size else 0.0)
        self.mean_residual.append(float(np.mean(residual)) if residual.size else 0.0)

    def to_frame(self):
        max_res = np.asarray(self.max_residual, dtype=float)
        mean_res = np.asarray(self.mean_residual, dtype=float)
        with np.errstate(divide="ignore"):
            return pd.DataFrame({
                "layer": np.arange(1, self.n_layers + 1),
                "max_residual": max_res,
                "mean_residual": mean_res,
                "log10_max_residual": np.log10(max_res),
                "log10_mean_residual": np.log10(mean_res),
            })


def _entries(Y):
    return Y.entries if isinstance(Y, NodalMatrix) else np.asarray(Y, dtype=float)


def _matvec(Y, theta):
    return np.matmul(Y, theta[..., None])[..., 0]


def _slack_hot(n, slack):
    return np.arange(n) == np.asarray(slack)[..., None]


def update_mask(Y, slack):
    """Buses the update touches: energized (y_ii > 0) and not the slack"""
    Y = _entries(Y)
    diag = np.diagonal(Y, axis1=-2, axis2=-1)
    return (diag > 0) & ~_slack_hot(diag.shape[-1], slack)


def lc_residual(theta, p, Y):
    """E = p - Y theta, for every bus including the slack"""
    return np.asarray(p, dtype=float) - _matvec(_entries(Y), np.asarray(theta, dtype=float))


def phasor_update(theta, p, Y, omega=1.0, slack=0):
    """One damped Jacobi layer.

    Messages sum y_ij theta_j over neighbours only; the self term y_ii is the
    divisor. Slack and non-energized slots are held at 0.
    """
    Y = _entries(Y)
    theta = np.asarray(theta, dtype=float)
    diag = np.diagonal(Y, axis1=-2, axis2=-1)
    mask = update_mask(Y, slack)
    messages = _matvec(Y, theta) - diag * theta
    jacobi = (np.asarray(p, dtype=float) - messages) / np.where(mask, diag, 1.0)
    return np.where(mask, (1.0 - omega) * theta + omega * jacobi, 0.0)


def _nonslack_residual(theta, p, Y, mask):
    return np.abs(lc_residual(theta, p, Y))[mask]


def mp_opt_solve(bg, p, config=None, Y=None):
    """Flat-start message passing until max |E| over non-slack buses < tol"""
    config = config or MpConfig()
    Y = Y if Y is not None else build_nodal_matrix(bg)
    entries = _entries(Y)
    slack = bg.slack_bus
    mask = update_mask(entries, slack)
    theta = np.zeros(entries.shape[-1])
    trajectory = MpTrajectory()
    residual = np.zeros(0)
    for _ in range(config.n_layers):
        theta = phasor_update(theta, p, entries, config.damping, slack)
        residual = _nonslack_residual(theta, p, entries, mask)
        trajectory.record(residual)
        if residual.size == 0 or residual.max() < config.tol:
            trajectory.converged = True
            return theta, trajectory
    worst = float(residual.max()) if residual.size else 0.0
    raise NotConverged(
        f"message passing stopped at {config.n_layers} layers with residual {worst:.3e} "
        f"(tol {config.tol:.1e})", theta, trajectory, worst)


@dataclass
class MpCache:
    Y: np.ndarray
    omega: float
    slack: object
    n_layers: int
    states: list


def mp_forward(theta0, p, Y, omega=1.0, n_layers=1, slack=0, keep_states=True):
    """Fixed-depth unrolled chain starting from an arbitrary theta0.

    theta0 has its slack entry pinned to 0 before the first layer; with
    n_layers = 0 that pinned copy is the output.
    """
    Y = _entries(Y)
    theta = np.where(_slack_hot(Y.shape[-1], slack), 0.0, np.asarray(theta0, dtype=float))
    states = [theta]
    for _ in range(int(n_layers)):
        theta = phasor_update(theta, p, Y, omega, slack)
        if keep_states:
            states.append(theta)
    if not keep_states:
        states.append(theta)
    return theta, MpCache(Y, omega, slack, int(n_layers), states)


def mp_adjoint(grad_wrt_theta_K, cache, layer_grads=None):
    """Reverse pass of mp_forward.

    Each layer is affine, theta' = M[(1 - w) theta + w D^-1 (p - R theta)], so
    the adjoint applies (1 - w) M g - w R^T D^-1 M g layer by layer. layer_grads,
    if given, holds direct loss gradients w.r.t. theta^(k) for k = 0..K and is
    accumulated on the way back.
    """
    Y = cache.Y
    diag = np.diagonal(Y, axis1=-2, axis2=-1)
    mask = update_mask(Y, cache.slack)
    safe = np.where(mask, diag, 1.0)
    omega = cache.omega
    g = np.array(grad_wrt_theta_K, dtype=float)
    if layer_grads is not None:
        g = g + layer_grads[cache.n_layers]
    for k in range(cache.n_layers, 0, -1):
        u = np.where(mask, g, 0.0)
        v = u / safe
        r_t_v = np.einsum("...ji,...j->...i", Y, v) - diag * v
        g = (1.0 - omega) * u - omega * r_t_v
        if layer_grads is not None:
            g = g + layer_grads[k - 1]
    return np.where(_slack_hot(Y.shape[-1], cache.slack), 0.0, g)


@dataclass
class BatchMpResult:
    theta: np.ndarray
    trajectory: MpTrajectory
    per_sample_max: np.ndarray
    per_sample_mean: np.ndarray
    converged: np.ndarray


def mp_solve_batch(Y, p, slack, n_layers, omega=1.0, tol=None, theta0=None):
    """Run the chain on stacked padded systems, recording residuals per layer.

    With tol given, a sample stops updating once it is below tol and the run
    ends when every sample is. Converged samples carry their last residual
    forward in the per-sample records. Samples that never get there are
    flagged in `converged`, not raised.
    """
    p = np.asarray(p, dtype=float)
    n = p.shape[0]
    Y = np.broadcast_to(_entries(Y), (n,) + p.shape[-1:] * 2)
    slack = np.broadcast_to(np.asarray(slack), (n,))
    mask = update_mask(Y, slack)
    counts = np.maximum(mask.sum(axis=-1), 1)
    theta = np.zeros_like(p) if theta0 is None else np.array(theta0, dtype=float)
    theta = np.where(_slack_hot(p.shape[-1], slack), 0.0, theta)
    trajectory = MpTrajectory()
    per_sample = []
    per_sample_mean = []
    converged = np.zeros(n, dtype=bool)
    sample_max = np.zeros(n)
    sample_mean = np.zeros(n)
    active = np.arange(n)
    Ya, pa, sa = Y, p, slack
    for _ in range(int(n_layers)):
        theta_a = phasor_update(theta[active], pa, Ya, omega, sa)
        theta[active] = theta_a
        residual = np.where(mask[active], np.abs(lc_residual(theta_a, pa, Ya)), 0.0)
        sample_max = sample_max.copy()
        sample_mean = sample_mean.copy()
        sample_max[active] = residual.max(axis=-1)
        sample_mean[active] = residual.sum(axis=-1) / counts[active]
        per_sample.append(sample_max)
        per_sample_mean.append(sample_mean)
        trajectory.max_residual.append(float(sample_max.max()))
        trajectory.mean_residual.append(float(sample_mean.mean()))
        if tol is not None:
            converged = sample_max < tol
            if converged.all():
                break
            if np.count_nonzero(~converged) < len(active):
                active = np.flatnonzero(~converged)
                Ya, pa, sa = Y[active], p[active], slack[active]
    trajectory.converged = bool(converged.all()) if tol is not None else False
    empty = np.zeros((0, n))
    per_sample = np.array(per_sample) if per_sample else empty
    per_sample_mean = np.array(per_sample_mean) if per_sample_mean else empty
    return BatchMpResult(theta, trajectory, per_sample, per_sample_mean, converged)
