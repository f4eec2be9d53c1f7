"""Backward adjoint solve via least-squares Monte Carlo, plus oracles.

The adjoint pair (Y, Z) solves the linear backward SDE with driver
-grad_x H and terminal condition grad g(X_T).  Conditional expectations
in the backward sweep are least-squares projections onto a polynomial
basis of the state (regression per time step, single deterministic
reduction).  An independent check of Y_0 comes from the explicit
representation through the fundamental solution of the linearised state
equation, which needs no conditional expectations at t = 0.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from math import comb
from typing import TYPE_CHECKING

import numpy as np

from .problem import hamiltonian_grad_x
from .sde import NoiseBank, StateEnsemble, TimeGrid

if TYPE_CHECKING:
    from .msa import ControlEnsemble
    from .problem import ControlProblem


class RegressionError(RuntimeError):
    """Raised when a backward regression step cannot be solved."""


@dataclass(frozen=True)
class RegressionBasis:
    """Polynomial regression basis for conditional expectations.

    ridge = None selects the default penalty 1e-8 * n_paths at fit time.
    Features are built from per-step standardised coordinates, which
    leaves the fitted projection unchanged (the polynomial span is
    invariant under affine maps) but keeps the normal equations well
    conditioned.
    """

    kind: str = "polynomial"
    degree: int = 2
    ridge: float | None = None

    def __post_init__(self) -> None:
        if self.kind != "polynomial":
            raise ValueError(f"unknown basis kind {self.kind!r}")
        if self.degree < 0:
            raise ValueError("degree must be >= 0")
        if self.ridge is not None and self.ridge < 0:
            raise ValueError("ridge must be nonnegative")

    def n_functions(self, state_dim: int) -> int:
        return comb(state_dim + self.degree, self.degree)

    def exponents(self, state_dim: int) -> np.ndarray:
        rows = []
        for total in range(self.degree + 1):
            for combo in itertools.combinations_with_replacement(
                range(state_dim), total
            ):
                e = np.zeros(state_dim, dtype=int)
                for i in combo:
                    e[i] += 1
                rows.append(e)
        return np.array(rows)

    def features(self, x: np.ndarray) -> np.ndarray:
        """Design matrix (M, B) of monomials of the standardised state."""
        mu = x.mean(axis=0)
        sd = x.std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        u = (x - mu) / sd
        exps = self.exponents(x.shape[1])
        return np.prod(u[:, None, :] ** exps[None, :, :], axis=2)


@dataclass(frozen=True)
class AdjointEnsemble:
    """Adjoint values: y (M, N+1, d) and z (M, N, d, d')."""

    y_values: np.ndarray
    z_values: np.ndarray

    def __post_init__(self) -> None:
        y = np.asarray(self.y_values, dtype=float)
        z = np.asarray(self.z_values, dtype=float)
        if y.ndim != 3 or z.ndim != 4:
            raise ValueError("y must be (M, N+1, d) and z must be (M, N, d, d')")
        y.setflags(write=False)
        z.setflags(write=False)
        object.__setattr__(self, "y_values", y)
        object.__setattr__(self, "z_values", z)


@dataclass(frozen=True)
class FundamentalSolutionEnsemble:
    """Fundamental solution S of the linearised state SDE, per path/node."""

    s_values: np.ndarray
    s_inverse_values: np.ndarray


def _ridge_solve(phi: np.ndarray, lam: float, targets: np.ndarray, step: int):
    gram = phi.T @ phi
    gram[np.diag_indices_from(gram)] += lam
    try:
        coef = np.linalg.solve(gram, phi.T @ targets)
    except np.linalg.LinAlgError as exc:
        raise RegressionError(
            f"regression solve failed at step {step}: {exc}"
        ) from exc
    return coef


def solve_adjoint_lsmc(
    p: "ControlProblem",
    grid: TimeGrid,
    noise: NoiseBank,
    states: StateEnsemble,
    control: "ControlEnsemble",
    basis: RegressionBasis,
) -> AdjointEnsemble:
    """Backward induction for the adjoint pair.

    Y_N = grad g(X_N); for k = N-1 .. 0:
        Yhat_k = E[Y_{k+1} | X_k]                      (projection)
        Z_k    = E[(Y_{k+1} - Yhat_k) dW_k^T | X_k]/dt (projection)
        Y_k    = Yhat_k + dt * grad_x H(t_k, X_k, Yhat_k, Z_k, a_k)

    Centring the Z target by Yhat_k leaves the conditional expectation
    unchanged (E[Yhat_k dW | X_k] = 0) and removes the dominant noise
    term, so a driverless problem yields Z = 0 up to the ridge bias.
    """
    m, n, d, dn = noise.n_paths, noise.n_steps, p.state_dim, p.noise_dim
    n_basis = basis.n_functions(d)
    if n_basis > m / 10:
        raise RegressionError(
            f"basis has {n_basis} functions for {m} paths; need n_basis <= M/10"
        )
    lam = basis.ridge if basis.ridge is not None else 1e-8 * m
    dt = grid.dt
    nodes = grid.nodes
    points = p.action_space.points
    idx = control.action_indices
    xs = states.values
    inc = noise.increments

    y = np.empty((m, n + 1, d))
    z = np.empty((m, n, d, dn))
    y[:, n] = np.asarray(p.terminal_cost_grad_x(xs[:, n]))
    for k in range(n - 1, -1, -1):
        phi = basis.features(xs[:, k])
        y_next = y[:, k + 1]
        coef_y = _ridge_solve(phi, lam, y_next, k)
        y_hat = phi @ coef_y
        resid = y_next - y_hat
        z_target = resid[:, :, None] * inc[:, k, None, :] / dt
        coef_z = _ridge_solve(phi, lam, z_target.reshape(m, d * dn), k)
        z_k = (phi @ coef_z).reshape(m, d, dn)
        a = points[idx[:, k]]
        drv = hamiltonian_grad_x(p, float(nodes[k]), xs[:, k], y_hat, z_k, a)
        y[:, k] = y_hat + dt * np.asarray(drv)
        if not (np.all(np.isfinite(y[:, k])) and np.all(np.isfinite(z_k))):
            raise RegressionError(f"non-finite adjoint values at step {k}")
        z[:, k] = z_k
    return AdjointEnsemble(y_values=y, z_values=z)


def simulate_fundamental(
    p: "ControlProblem",
    grid: TimeGrid,
    noise: NoiseBank,
    states: StateEnsemble,
    control: "ControlEnsemble",
) -> FundamentalSolutionEnsemble:
    """Euler scheme for the fundamental solution S, S_0 = I.

    dS^{ij} = S^{il} d_l b^j dt + S^{il} d_l sigma^{jp} dW^p.
    """
    m, n, d = noise.n_paths, noise.n_steps, p.state_dim
    dt = grid.dt
    nodes = grid.nodes
    points = p.action_space.points
    idx = control.action_indices
    xs = states.values
    inc = noise.increments

    s = np.empty((m, n + 1, d, d))
    s[:, 0] = np.eye(d)
    cur = s[:, 0].copy()
    for k in range(n):
        x = xs[:, k]
        a = points[idx[:, k]]
        t = float(nodes[k])
        jb = np.asarray(p.drift_jac_x(t, x, a))
        js = np.asarray(p.diffusion_jac_x(t, x, a))
        cur = (
            cur
            + np.einsum("mil,mjl->mij", cur, jb) * dt
            + np.einsum("mil,mjpl,mp->mij", cur, js, inc[:, k])
        )
        if not np.all(np.isfinite(cur)):
            bad = int(np.where(~np.isfinite(cur).reshape(m, -1).all(axis=1))[0][0])
            raise RegressionError(
                f"non-finite fundamental solution at step {k + 1}, path {bad}"
            )
        s[:, k + 1] = cur
    return FundamentalSolutionEnsemble(
        s_values=s, s_inverse_values=np.linalg.inv(s)
    )


def solve_adjoint_linear_y0(
    p: "ControlProblem",
    grid: TimeGrid,
    noise: NoiseBank,
    states: StateEnsemble,
    control: "ControlEnsemble",
) -> tuple[np.ndarray, np.ndarray]:
    """Plain Monte-Carlo estimate of Y_0 from the explicit representation.

    Y_0 = E[ S_T grad g(X_T) + sum_k S_{t_k} grad_x f(t_k, X_k, a_k) dt ]
    with S the fundamental solution started at the identity.  Returns
    (estimate, standard error), both d-vectors.
    """
    m, n, d = noise.n_paths, noise.n_steps, p.state_dim
    dt = grid.dt
    nodes = grid.nodes
    points = p.action_space.points
    idx = control.action_indices
    xs = states.values
    inc = noise.increments

    s = np.broadcast_to(np.eye(d), (m, d, d)).copy()
    contrib = np.zeros((m, d))
    for k in range(n):
        x = xs[:, k]
        a = points[idx[:, k]]
        t = float(nodes[k])
        fx = np.asarray(p.running_cost_grad_x(t, x, a))
        contrib += np.einsum("mij,mj->mi", s, fx) * dt
        jb = np.asarray(p.drift_jac_x(t, x, a))
        js = np.asarray(p.diffusion_jac_x(t, x, a))
        s = (
            s
            + np.einsum("mil,mjl->mij", s, jb) * dt
            + np.einsum("mil,mjpl,mp->mij", s, js, inc[:, k])
        )
        if not np.all(np.isfinite(s)):
            bad = int(np.where(~np.isfinite(s).reshape(m, -1).all(axis=1))[0][0])
            raise RegressionError(
                f"non-finite fundamental solution at step {k + 1}, path {bad}"
            )
    gx = np.asarray(p.terminal_cost_grad_x(xs[:, n]))
    contrib += np.einsum("mij,mj->mi", s, gx)
    y0 = contrib.mean(axis=0)
    if m > 1:
        se = contrib.std(axis=0, ddof=1) / np.sqrt(m)
    else:
        se = np.zeros(d)
    return y0, se


def adjoint_residual(
    p: "ControlProblem",
    grid: TimeGrid,
    noise: NoiseBank,
    states: StateEnsemble,
    control: "ControlEnsemble",
    adjoint: AdjointEnsemble,
) -> float:
    """Mean-square one-step backward residual, averaged over paths and steps.

    residual = E (1/N) sum_k |Y_{k+1} - Y_k + dt grad_x H(t_k, X_k, Y_k,
    Z_k, a_k) - Z_k dW_k|^2.
    """
    m, n = noise.n_paths, noise.n_steps
    dt = grid.dt
    nodes = grid.nodes
    points = p.action_space.points
    idx = control.action_indices
    xs = states.values
    inc = noise.increments
    y = adjoint.y_values
    z = adjoint.z_values

    acc = np.zeros(m)
    for k in range(n):
        a = points[idx[:, k]]
        drv = hamiltonian_grad_x(p, float(nodes[k]), xs[:, k], y[:, k], z[:, k], a)
        r = (
            y[:, k + 1]
            - y[:, k]
            + dt * np.asarray(drv)
            - np.einsum("mjp,mp->mj", z[:, k], inc[:, k])
        )
        acc += np.einsum("mj,mj->m", r, r)
    return float(acc.mean() / n)
