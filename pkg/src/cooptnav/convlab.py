"""Numerical verification of the tracking theory on synthetic objectives.

A time-varying objective g(alpha, theta) with exact gradients is tracked
two ways: by integrating the limiting gradient-flow ODE
eta * theta'(alpha) = -grad g(alpha, theta) with 4th-order Runge-Kutta,
and by the discrete proximal update theta <- theta - (dalpha/eta) * grad.
check_theorem1 compares the measured deviation against the analytic bound
(C_h eta / C_L)(e^(C_L T / eta) - 1) dalpha + C * eps with
C = (e^(C_L T / eta) - 1) / C_L, using an empirically measured curvature
constant C_h.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError

_DIVERGENCE_LIMIT = 1e12


@dataclass
class TimeVaryingProblem:
    """Objective evaluator with exact gradient and optional bounded noise."""

    name: str
    dim: int
    g: callable                  # (alpha, theta) -> float
    grad_g: callable             # (alpha, theta) -> (dim,)
    theta0: np.ndarray           # local minimum of g(0, .)
    lipschitz: float | None = None

    def __post_init__(self):
        self.theta0 = np.asarray(self.theta0, dtype=np.float64).reshape(self.dim)


def quadratic_problem(target=None, dim=2):
    """g = 0.5 |theta - c|^2 with constant target c (C_L = 1)."""
    c = np.zeros(dim) if target is None else np.asarray(target, float)
    return TimeVaryingProblem(
        name="quadratic", dim=dim,
        g=lambda alpha, th: 0.5 * float(np.sum((th - c) ** 2)),
        grad_g=lambda alpha, th: th - c,
        theta0=c.copy(), lipschitz=1.0)


def moving_target_problem(velocity=1.0, dim=2):
    """g = 0.5 |theta - v * alpha|^2, target drifting linearly (C_L = 1)."""
    v = np.full(dim, float(velocity))
    return TimeVaryingProblem(
        name="moving_quadratic", dim=dim,
        g=lambda alpha, th: 0.5 * float(np.sum((th - v * alpha) ** 2)),
        grad_g=lambda alpha, th: th - v * alpha,
        theta0=np.zeros(dim), lipschitz=1.0)


def sinusoidal_problem(velocity=0.5, amplitude=0.3, frequency=5.0):
    """Non-convex 1-D: g = (theta - v*alpha)^2 + amplitude * sin(f*theta).

    theta0 solves grad g(0, theta) = 0 near the origin (Newton refinement).
    """
    def grad(alpha, th):
        return (2.0 * (th - velocity * alpha)
                + amplitude * frequency * np.cos(frequency * th))

    th = np.zeros(1)
    for _ in range(100):
        h = 2.0 - amplitude * frequency ** 2 * np.sin(frequency * th)
        th = th - grad(0.0, th) / h
    lip = 2.0 + amplitude * frequency ** 2
    return TimeVaryingProblem(
        name="sinusoidal", dim=1,
        g=lambda alpha, t: float((t[0] - velocity * alpha) ** 2
                                 + amplitude * np.sin(frequency * t[0])),
        grad_g=grad, theta0=th, lipschitz=lip)


BUNDLED_PROBLEMS = {
    "quadratic": quadratic_problem,
    "moving_quadratic": moving_target_problem,
    "sinusoidal": sinusoidal_problem,
}


def make_noise_model(eps, seed=0):
    """Perturbation of norm exactly eps in a seeded random direction."""
    rng = np.random.default_rng(seed)

    def noise(dim):
        if eps == 0.0:
            return np.zeros(dim)
        direction = rng.standard_normal(dim)
        norm = np.linalg.norm(direction)
        if norm == 0.0:
            direction[0] = 1.0
            norm = 1.0
        return eps * direction / norm

    return noise


# ---------------------------------------------------------------------------
# ODE tracking
# ---------------------------------------------------------------------------

@dataclass
class OdeSolution:
    """Dense RK4 solution with linear interpolation between fine steps."""

    alphas: np.ndarray
    thetas: np.ndarray           # (len(alphas), dim)

    def __call__(self, alpha):
        a = np.clip(alpha, self.alphas[0], self.alphas[-1])
        out = np.empty(self.thetas.shape[1])
        for d in range(self.thetas.shape[1]):
            out[d] = np.interp(a, self.alphas, self.thetas[:, d])
        return out

    def derivative_samples(self, problem, eta):
        return np.array([-problem.grad_g(a, th) / eta
                         for a, th in zip(self.alphas, self.thetas)])


def ode_solve(problem, theta0, eta, horizon, substep):
    """Integrate eta * theta' = -grad g with classic RK4 at a fixed substep."""
    theta0 = np.asarray(theta0, dtype=np.float64)
    n_steps = max(int(np.ceil(horizon / substep)), 1)
    h = horizon / n_steps
    alphas = np.zeros(n_steps + 1)
    thetas = np.zeros((n_steps + 1, len(theta0)))
    thetas[0] = theta0

    def f(alpha, th):
        return -problem.grad_g(alpha, th) / eta

    th = theta0.copy()
    a = 0.0
    for i in range(n_steps):
        k1 = f(a, th)
        k2 = f(a + h / 2.0, th + h / 2.0 * k1)
        k3 = f(a + h / 2.0, th + h / 2.0 * k2)
        k4 = f(a + h, th + h * k3)
        th = th + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        a += h
        if not np.all(np.isfinite(th)) or np.linalg.norm(th) > _DIVERGENCE_LIMIT:
            raise NumericError(f"ODE solution diverged at alpha={a:.4g}")
        alphas[i + 1] = a
        thetas[i + 1] = th
    return OdeSolution(alphas, thetas)


@dataclass
class TrackingRun:
    """Discrete sequence, ODE samples at the same alphas, and deviations."""

    problem: TimeVaryingProblem
    alphas: np.ndarray
    thetas: np.ndarray           # discrete sequence (K+1, dim)
    ode_thetas: np.ndarray       # ODE samples (K+1, dim)
    errors: np.ndarray           # |ode - discrete| per iteration
    delta_alpha: float
    eta: float
    horizon: float
    eps: float
    solution: OdeSolution = field(repr=False, default=None)

    @property
    def max_error(self):
        return float(self.errors.max())


def proximal_sequence(problem, theta0, delta_alpha, eta, horizon,
                      eps=0.0, noise_seed=0, substep_divisor=10):
    """Discrete tracking sequence theta <- theta - (dalpha/eta) * grad.

    The step size delta_beta = delta_alpha / eta realizes the proximal
    regularization; an optional noise model perturbs each gradient by a
    vector of norm eps. Deviations are recorded against the RK4 ODE
    solution sampled at the same alphas.
    """
    theta0 = np.asarray(theta0, dtype=np.float64)
    substep = delta_alpha / substep_divisor
    solution = ode_solve(problem, theta0, eta, horizon, substep)
    noise = make_noise_model(eps, noise_seed)
    n_iters = int(np.floor(horizon / delta_alpha))
    alphas = np.arange(n_iters + 1) * delta_alpha
    thetas = np.zeros((n_iters + 1, len(theta0)))
    thetas[0] = theta0
    th = theta0.copy()
    for k in range(n_iters):
        grad = problem.grad_g(alphas[k], th) + noise(len(th))
        th = th - (delta_alpha / eta) * grad
        if not np.all(np.isfinite(th)) or np.linalg.norm(th) > _DIVERGENCE_LIMIT:
            raise NumericError(f"discrete sequence diverged at k={k}")
        thetas[k + 1] = th
    ode_samples = np.array([solution(a) for a in alphas])
    errors = np.linalg.norm(ode_samples - thetas, axis=1)
    return TrackingRun(problem, alphas, thetas, ode_samples, errors,
                       delta_alpha, eta, horizon, eps, solution)


def measure_curvature(run):
    """Empirical C_h: max |theta''| / 2 along the ODE trajectory.

    theta'' is estimated by central differences of the ODE derivative
    -grad g / eta on the fine integration grid.
    """
    sol = run.solution
    derivs = sol.derivative_samples(run.problem, run.eta)
    if len(sol.alphas) < 3:
        return 0.0
    h = sol.alphas[1] - sol.alphas[0]
    second = (derivs[2:] - derivs[:-2]) / (2.0 * h)
    return float(np.linalg.norm(second, axis=1).max() / 2.0)


def check_theorem1(run, lipschitz, eta=None, horizon=None, eps=None):
    """Compare the measured deviation against the analytic tracking bound.

    bound = (C_h * eta / C_L)(e^(C_L T / eta) - 1) * dalpha + C * eps,
    C = (e^(C_L T / eta) - 1) / C_L, with C_h measured on the trajectory.
    """
    eta = run.eta if eta is None else eta
    horizon = run.horizon if horizon is None else horizon
    eps = run.eps if eps is None else eps
    c_h = measure_curvature(run)
    growth = np.exp(lipschitz * horizon / eta) - 1.0
    bound = (c_h * eta / lipschitz) * growth * run.delta_alpha \
        + (growth / lipschitz) * eps
    return {
        "max_error": run.max_error,
        "bound": float(bound),
        "c_h": c_h,
        "satisfied": bool(run.max_error <= bound),
    }


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

SWEEP_COLUMNS = ("problem", "delta_alpha", "eta", "eps", "max_error",
                 "bound", "satisfied")


def run_sweep(entries):
    """Run (problem, delta_alpha, eta, eps, horizon) combinations.

    Each entry is a dict with keys problem (bundled name), delta_alpha,
    eta, eps, horizon, and optional noise_seed. Returns a list of result
    rows following SWEEP_COLUMNS.
    """
    rows = []
    for entry in entries:
        problem = BUNDLED_PROBLEMS[entry["problem"]]()
        run = proximal_sequence(
            problem, problem.theta0, entry["delta_alpha"], entry["eta"],
            entry["horizon"], eps=entry.get("eps", 0.0),
            noise_seed=entry.get("noise_seed", 0))
        verdict = check_theorem1(run, problem.lipschitz)
        rows.append({
            "problem": problem.name,
            "delta_alpha": entry["delta_alpha"],
            "eta": entry["eta"],
            "eps": entry.get("eps", 0.0),
            "max_error": verdict["max_error"],
            "bound": verdict["bound"],
            "satisfied": verdict["satisfied"],
        })
    return rows


def sweep_csv(rows):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: row[k] for k in SWEEP_COLUMNS})
    return buf.getvalue()


def halving_ratios(rows):
    """Error ratios between consecutive delta_alpha halvings per problem."""
    ratios = []
    by_problem = {}
    for row in rows:
        by_problem.setdefault((row["problem"], row["eta"], row["eps"]),
                              []).append(row)
    for group in by_problem.values():
        group = sorted(group, key=lambda r: -r["delta_alpha"])
        for a, b in zip(group, group[1:]):
            if abs(a["delta_alpha"] - 2.0 * b["delta_alpha"]) < 1e-12:
                ratios.append(b["max_error"] / a["max_error"])
    return ratios
