"""Low-level controller stack: finite-horizon MPC and wheel kinematics.

The MPC regulates the discretized single integrator x[k+1] = x[k] + dt*u[k]
in error coordinates (x := p - p_ref) under a quadratic cost and a box
on the inputs, solved by projected gradient on the condensed quadratic.
The four-wheel map converts a planar velocity command into omnidirectional
wheel speeds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericError

_SQRT2 = np.sqrt(2.0)

# rows: wheel 1..4; columns: (u_x, u_y, omega * l)
WHEEL_MATRIX = np.array([
    [1.0 / _SQRT2, 1.0 / _SQRT2, 1.0],
    [-1.0 / _SQRT2, 1.0 / _SQRT2, 1.0],
    [-1.0 / _SQRT2, -1.0 / _SQRT2, 1.0],
    [1.0 / _SQRT2, -1.0 / _SQRT2, 1.0],
])


@dataclass(frozen=True)
class WheelGeometry:
    length: float     # center-to-edge distance l

    def __post_init__(self):
        if self.length <= 0:
            raise ConfigurationError("wheel geometry length must be positive")


def wheel_speeds(u, omega, geom):
    """Four omnidirectional wheel speeds for a planar command (u, omega)."""
    u = np.asarray(u, dtype=np.float64).reshape(2)
    if not np.all(np.isfinite(u)) or not np.isfinite(omega):
        raise NumericError("non-finite velocity command")
    kin = WHEEL_MATRIX.copy()
    kin[:, 2] *= geom.length
    return kin @ np.array([u[0], u[1], float(omega)])


@dataclass(frozen=True)
class MpcSpec:
    """Horizon, weights and input box of the integrator MPC."""

    horizon: int
    q: np.ndarray = field(default=None)
    r: np.ndarray = field(default=None)
    p: np.ndarray = field(default=None)
    dt: float = 0.05
    u_lo: tuple = (-np.inf, -np.inf)
    u_hi: tuple = (np.inf, np.inf)

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigurationError("horizon M must be >= 1")
        for name, default in (("q", np.eye(2)), ("r", 0.1 * np.eye(2)),
                              ("p", np.eye(2))):
            mat = getattr(self, name)
            mat = default if mat is None else np.asarray(mat, dtype=np.float64)
            if mat.shape != (2, 2) or not np.allclose(mat, mat.T):
                raise ConfigurationError(f"{name.upper()} must be symmetric 2x2")
            if np.any(np.linalg.eigvalsh(mat) < -1e-12):
                raise ConfigurationError(f"{name.upper()} must be PSD")
            object.__setattr__(self, name, mat)
        lo = np.asarray(self.u_lo, dtype=np.float64).reshape(2)
        hi = np.asarray(self.u_hi, dtype=np.float64).reshape(2)
        if np.any(lo > hi):
            raise ConfigurationError("empty input box")
        object.__setattr__(self, "u_lo", tuple(lo))
        object.__setattr__(self, "u_hi", tuple(hi))


def _condense(spec, x0):
    """Quadratic J(u) = u^T H u + 2 f^T u + const over stacked inputs.

    States are x_k = x0 + dt * sum_(j<k) u_j; the cost weighs x_0..x_(M-1)
    with Q, x_M with P and each input with R.
    """
    m = spec.horizon
    dt = spec.dt
    # G maps stacked u to stacked (x_1 .. x_M): block lower-triangular of dt*I
    g = np.zeros((2 * m, 2 * m))
    for k in range(1, m + 1):
        for j in range(k):
            g[2 * (k - 1):2 * k, 2 * j:2 * (j + 1)] = dt * np.eye(2)
    w_blocks = [spec.q] * (m - 1) + [spec.p]
    w = np.zeros((2 * m, 2 * m))
    for k, blk in enumerate(w_blocks):
        w[2 * k:2 * (k + 1), 2 * k:2 * (k + 1)] = blk
    r = np.zeros((2 * m, 2 * m))
    for k in range(m):
        r[2 * k:2 * (k + 1), 2 * k:2 * (k + 1)] = spec.r
    x0_stack = np.tile(np.asarray(x0, dtype=np.float64).reshape(2), m)
    h = g.T @ w @ g + r
    f = g.T @ w @ x0_stack
    return h, f


def mpc_solve_unconstrained(spec, x0):
    """Closed-form batch least-squares solution (no input box)."""
    h, f = _condense(spec, x0)
    u = np.linalg.solve(h + 1e-15 * np.eye(len(f)), -f)
    return u.reshape(spec.horizon, 2)


def mpc_solve(spec, x0, tol=1e-8, max_iters=10_000):
    """Minimize the condensed quadratic under the input box.

    Projected gradient with step 1/L, terminating when the gradient-mapping
    norm drops below tol; raises NumericError with the residual when the
    iteration budget is exhausted.
    """
    x0 = np.asarray(x0, dtype=np.float64).reshape(2)
    if not np.all(np.isfinite(x0)):
        raise NumericError("non-finite initial state")
    h, f = _condense(spec, x0)
    lo = np.tile(spec.u_lo, spec.horizon)
    hi = np.tile(spec.u_hi, spec.horizon)
    lip = float(np.linalg.eigvalsh(2.0 * h).max())
    if lip <= 0.0:
        return np.clip(np.zeros(2 * spec.horizon), lo, hi).reshape(-1, 2)
    step = 1.0 / lip
    u = np.clip(np.zeros(2 * spec.horizon), lo, hi)
    residual = np.inf
    for _ in range(max_iters):
        grad = 2.0 * (h @ u) + 2.0 * f
        new_u = np.clip(u - step * grad, lo, hi)
        residual = float(np.linalg.norm((u - new_u) / step))
        u = new_u
        if residual < tol:
            return u.reshape(spec.horizon, 2)
    raise NumericError(
        f"MPC projected gradient did not converge: residual {residual:.3e} "
        f"after {max_iters} iterations")


def mpc_cost(spec, x0, u_seq):
    """Evaluate the finite-horizon cost of an input sequence."""
    x = np.asarray(x0, dtype=np.float64).reshape(2)
    u_seq = np.asarray(u_seq, dtype=np.float64).reshape(spec.horizon, 2)
    total = 0.0
    for k in range(spec.horizon):
        total += x @ spec.q @ x + u_seq[k] @ spec.r @ u_seq[k]
        x = x + spec.dt * u_seq[k]
    return float(total + x @ spec.p @ x)


def make_mpc_filter(scenario, horizon=10):
    """Executed-action filter: track the policy's one-step waypoint.

    For each agent the desired velocity defines a waypoint p + v*dt; the
    MPC regulates the error to that waypoint under the velocity box and
    its first input replaces the raw command.
    """
    spec = MpcSpec(horizon=horizon, dt=scenario.dt,
                   u_lo=(-scenario.v_max, -scenario.v_max),
                   u_hi=(scenario.v_max, scenario.v_max))

    def apply(state, desired):
        out = np.empty_like(desired)
        for i in range(len(desired)):
            err0 = -desired[i] * scenario.dt   # x = p - (p + v dt)
            out[i] = mpc_solve(spec, err0)[0]
        return out

    return apply
