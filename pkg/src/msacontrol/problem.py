"""Control problem data model and Hamiltonian evaluation.

A problem bundles the coefficient functions (b, sigma, f, g), their
x-derivatives, dimensions, horizon, initial state, and a finite action
set.  Dynamics and cost:

    dX = b(t, X, a) dt + sigma(t, X, a) dW,    X_0 = x0
    J(alpha) = E[ integral_0^T f(t, X, alpha) dt + g(X_T) ]

All coefficient callables must be vectorised over paths: x arrives with
shape (..., d) and a with shape (..., m), sharing leading batch axes,
and outputs carry the same batch axes (t is always a scalar).
Derivative index conventions:

    drift_jac_x(t, x, a)[..., j, i]        = d b^j / d x_i
    diffusion_jac_x(t, x, a)[..., j, p, i] = d sigma^{jp} / d x_i
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class ProblemDefinitionError(ValueError):
    """Raised when a problem definition is inconsistent."""


class EvaluationError(RuntimeError):
    """Raised when a coefficient function produces non-finite values."""


def _as_readonly(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=float, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ActionSpace:
    """Finite set of admissible actions, each a real m-vector.

    Scalar actions may be given as a 1-D sequence; they are stored as an
    (n_actions, 1) array.
    """

    points: np.ndarray

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] == 0 or pts.shape[1] == 0:
            raise ProblemDefinitionError(
                "action points must form a nonempty (n_actions, m) array"
            )
        if not np.all(np.isfinite(pts)):
            raise ProblemDefinitionError("action points must all be finite")
        if np.unique(pts, axis=0).shape[0] != pts.shape[0]:
            raise ProblemDefinitionError("action points must be distinct")
        object.__setattr__(self, "points", _as_readonly(pts))

    @property
    def n_actions(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def centroid_index(self) -> int:
        """Index of the point closest to the centroid (lowest index on ties)."""
        centroid = self.points.mean(axis=0)
        dist = np.linalg.norm(self.points - centroid, axis=1)
        return int(np.argmin(dist))


@dataclass(frozen=True)
class ControlProblem:
    """Finite-horizon stochastic control problem with a finite action set.

    The four coefficient functions and their x-derivatives are supplied
    analytically; ``check_derivatives`` validates them against central
    finite differences.  ``lipschitz_bound`` is optional metadata and is
    not used by the solver.
    """

    state_dim: int
    noise_dim: int
    horizon: float
    initial_state: np.ndarray
    drift: Callable
    diffusion: Callable
    running_cost: Callable
    terminal_cost: Callable
    drift_jac_x: Callable
    diffusion_jac_x: Callable
    running_cost_grad_x: Callable
    terminal_cost_grad_x: Callable
    action_space: ActionSpace
    lipschitz_bound: float | None = None
    name: str = ""

    def __post_init__(self) -> None:
        if self.state_dim < 1 or self.noise_dim < 1:
            raise ProblemDefinitionError("state_dim and noise_dim must be >= 1")
        if not (self.horizon > 0 and np.isfinite(self.horizon)):
            raise ProblemDefinitionError("horizon must be positive and finite")
        x0 = np.atleast_1d(np.asarray(self.initial_state, dtype=float))
        if x0.shape != (self.state_dim,):
            raise ProblemDefinitionError(
                f"initial_state has shape {x0.shape}, expected ({self.state_dim},)"
            )
        object.__setattr__(self, "initial_state", _as_readonly(x0))
        self._probe()

    def _probe(self) -> None:
        # Shape checks at (t=0, x0, a0), single point and a batch of 3,
        # so non-broadcasting coefficient functions fail at construction.
        d, dn, m = self.state_dim, self.noise_dim, self.action_space.dim
        x0 = self.initial_state
        a0 = self.action_space.points[0]
        for batch in ((), (3,)):
            x = np.broadcast_to(x0, batch + (d,))
            a = np.broadcast_to(a0, batch + (m,))
            expected = {
                "drift": batch + (d,),
                "diffusion": batch + (d, dn),
                "running_cost": batch,
                "terminal_cost": batch,
                "drift_jac_x": batch + (d, d),
                "diffusion_jac_x": batch + (d, dn, d),
                "running_cost_grad_x": batch + (d,),
                "terminal_cost_grad_x": batch + (d,),
            }
            for fname, shape in expected.items():
                fn = getattr(self, fname)
                if fname in ("terminal_cost", "terminal_cost_grad_x"):
                    out = np.asarray(fn(x))
                else:
                    out = np.asarray(fn(0.0, x, a))
                if out.shape != shape:
                    raise ProblemDefinitionError(
                        f"{fname} returned shape {out.shape}, expected {shape} "
                        f"(batch {batch})"
                    )
                if not np.all(np.isfinite(out)):
                    raise ProblemDefinitionError(
                        f"{fname} returned non-finite values at the probe point"
                    )

    def replace(self, **kwargs) -> "ControlProblem":
        return dataclasses.replace(self, **kwargs)


def _check_finite(name: str, value: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise EvaluationError(f"{name} produced non-finite values")
    return value


def hamiltonian(p: ControlProblem, t, x, y, z, a):
    """H(t, x, y, z, a) = b . y + trace(sigma^T z) + f.

    Broadcasts over leading batch axes of x, y, z, a.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    a = np.asarray(a, dtype=float)
    b = _check_finite("drift", np.asarray(p.drift(t, x, a)))
    sig = _check_finite("diffusion", np.asarray(p.diffusion(t, x, a)))
    f = _check_finite("running_cost", np.asarray(p.running_cost(t, x, a)))
    return (
        np.einsum("...j,...j->...", b, y)
        + np.einsum("...jp,...jp->...", sig, z)
        + f
    )


def hamiltonian_grad_x(p: ControlProblem, t, x, y, z, a):
    """Gradient of H in x.

    Component i is sum_j (d_i b^j) y^j + sum_{j,p} (d_i sigma^{jp}) z^{jp}
    + d_i f.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    a = np.asarray(a, dtype=float)
    jb = _check_finite("drift_jac_x", np.asarray(p.drift_jac_x(t, x, a)))
    js = _check_finite("diffusion_jac_x", np.asarray(p.diffusion_jac_x(t, x, a)))
    fx = _check_finite(
        "running_cost_grad_x", np.asarray(p.running_cost_grad_x(t, x, a))
    )
    return (
        np.einsum("...ji,...j->...i", jb, y)
        + np.einsum("...jpi,...jp->...i", js, z)
        + fx
    )


def augmented_hamiltonian(p: ControlProblem, t, x, y, z, a_prev, a, rho):
    """H(a) plus rho/2-weighted squared coefficient differences against a_prev.

    With rho = 0 this is exactly the Hamiltonian at a.  The penalty is
    (rho/2) (|b(a)-b(a_prev)|^2 + |sigma(a)-sigma(a_prev)|^2
             + |grad_x H(a) - grad_x H(a_prev)|^2).
    """
    if rho < 0:
        raise ValueError("rho must be nonnegative")
    h = hamiltonian(p, t, x, y, z, a)
    if rho == 0:
        return h
    x = np.asarray(x, dtype=float)
    a = np.asarray(a, dtype=float)
    a_prev = np.asarray(a_prev, dtype=float)
    db = np.asarray(p.drift(t, x, a)) - np.asarray(p.drift(t, x, a_prev))
    dsig = np.asarray(p.diffusion(t, x, a)) - np.asarray(p.diffusion(t, x, a_prev))
    dgrad = hamiltonian_grad_x(p, t, x, y, z, a) - hamiltonian_grad_x(
        p, t, x, y, z, a_prev
    )
    penalty = (
        np.einsum("...j,...j->...", db, db)
        + np.einsum("...jp,...jp->...", dsig, dsig)
        + np.einsum("...j,...j->...", dgrad, dgrad)
    )
    return h + 0.5 * rho * penalty


@dataclass(frozen=True)
class DerivativeReport:
    """Maximum relative finite-difference error per supplied derivative."""

    max_errors: dict[str, float]
    n_samples: int
    step: float

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.max_errors, key=self.max_errors.get)
        return name, self.max_errors[name]

    def within(self, tol: float) -> bool:
        return all(e <= tol for e in self.max_errors.values())


def _rel_error(analytic: np.ndarray, fd: np.ndarray) -> float:
    scale = max(1.0, float(np.max(np.abs(analytic))), float(np.max(np.abs(fd))))
    return float(np.max(np.abs(analytic - fd))) / scale


def check_derivatives(
    p: ControlProblem,
    n_samples: int,
    step: float,
    seed: int = 0,
    state_box: tuple | None = None,
) -> DerivativeReport:
    """Compare supplied x-derivatives with central finite differences.

    Samples (t, x, a) uniformly from [0, T] x state box x action points.
    The state box defaults to [x0 - 5, x0 + 5] per coordinate.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if step <= 0:
        raise ValueError("step must be positive")
    d = p.state_dim
    rng = np.random.default_rng(seed)
    if state_box is None:
        lo, hi = p.initial_state - 5.0, p.initial_state + 5.0
    else:
        lo = np.broadcast_to(np.asarray(state_box[0], dtype=float), (d,))
        hi = np.broadcast_to(np.asarray(state_box[1], dtype=float), (d,))
    ts = rng.uniform(0.0, p.horizon, size=n_samples)
    xs = rng.uniform(lo, hi, size=(n_samples, d))
    a_idx = rng.integers(0, p.action_space.n_actions, size=n_samples)

    errors = {
        "drift_jac_x": 0.0,
        "diffusion_jac_x": 0.0,
        "running_cost_grad_x": 0.0,
        "terminal_cost_grad_x": 0.0,
    }
    eye = np.eye(d)
    for s in range(n_samples):
        t, x = float(ts[s]), xs[s]
        a = p.action_space.points[a_idx[s]]
        # (2d, d) probe block: first d rows x + step*e_i, then x - step*e_i
        xp = np.concatenate([x + step * eye, x - step * eye], axis=0)
        ab = np.broadcast_to(a, (2 * d, a.shape[0]))

        bv = np.asarray(p.drift(t, xp, ab))
        fd_b = (bv[:d] - bv[d:]) / (2.0 * step)          # [i, j] = d b^j / d x_i
        an_b = np.asarray(p.drift_jac_x(t, x, a))         # [j, i]
        errors["drift_jac_x"] = max(errors["drift_jac_x"], _rel_error(an_b, fd_b.T))

        sv = np.asarray(p.diffusion(t, xp, ab))
        fd_s = (sv[:d] - sv[d:]) / (2.0 * step)           # [i, j, p]
        an_s = np.asarray(p.diffusion_jac_x(t, x, a))     # [j, p, i]
        errors["diffusion_jac_x"] = max(
            errors["diffusion_jac_x"], _rel_error(an_s, np.moveaxis(fd_s, 0, -1))
        )

        fv = np.asarray(p.running_cost(t, xp, ab))
        fd_f = (fv[:d] - fv[d:]) / (2.0 * step)
        an_f = np.asarray(p.running_cost_grad_x(t, x, a))
        errors["running_cost_grad_x"] = max(
            errors["running_cost_grad_x"], _rel_error(an_f, fd_f)
        )

        gv = np.asarray(p.terminal_cost(xp))
        fd_g = (gv[:d] - gv[d:]) / (2.0 * step)
        an_g = np.asarray(p.terminal_cost_grad_x(x))
        errors["terminal_cost_grad_x"] = max(
            errors["terminal_cost_grad_x"], _rel_error(an_g, fd_g)
        )

    return DerivativeReport(max_errors=errors, n_samples=n_samples, step=step)
