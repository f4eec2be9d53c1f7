"""Ground-truth generators and the benchmark problem suite.

Independent of the solver path: a Riccati ODE oracle for the scalar
linear-quadratic benchmark, exhaustive enumeration over deterministic
action sequences for small instances, a duplicate scalar Hamiltonian
evaluator, and a linear-ODE adjoint oracle for constant controls.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .problem import ActionSpace, ControlProblem
from .sde import NoiseBank, TimeGrid


def _as_time_fn(value) -> Callable[[float], float]:
    if callable(value):
        return value
    const = float(value)
    return lambda t: const


@dataclass(frozen=True)
class StructuredProblem:
    """Problem with affine-in-state coefficients and split running cost.

    b(t,x,a) = b1(t) x + b2(t,a); sigma(t,x,a) = sigma1(t) x + sigma2(t,a);
    f(t,x,a) = f1(t,x) + f2(t,a).  sigma1 is a (d, d', d) tensor acting on
    x; its second x-derivative vanishes by construction.
    """

    state_dim: int
    noise_dim: int
    horizon: float
    initial_state: np.ndarray
    b1: Callable
    b2: Callable
    sigma1: Callable
    sigma2: Callable
    f1: Callable
    f1_grad_x: Callable
    f2: Callable
    terminal: Callable
    terminal_grad_x: Callable
    action_space: ActionSpace
    name: str = ""
    lipschitz_bound: float | None = None

    def assemble(self) -> ControlProblem:
        b1, b2 = self.b1, self.b2
        sigma1, sigma2 = self.sigma1, self.sigma2
        f1, f1_grad, f2 = self.f1, self.f1_grad_x, self.f2

        def drift(t, x, a):
            return np.einsum("ji,...i->...j", b1(t), x) + b2(t, a)

        def diffusion(t, x, a):
            return np.einsum("jpi,...i->...jp", sigma1(t), x) + sigma2(t, a)

        def running_cost(t, x, a):
            return f1(t, x) + f2(t, a)

        def drift_jac_x(t, x, a):
            return np.broadcast_to(b1(t), x.shape[:-1] + (x.shape[-1],) * 2)

        def diffusion_jac_x(t, x, a):
            s1 = np.asarray(sigma1(t))
            return np.broadcast_to(s1, x.shape[:-1] + s1.shape)

        def running_cost_grad_x(t, x, a):
            return f1_grad(t, x)

        return ControlProblem(
            state_dim=self.state_dim,
            noise_dim=self.noise_dim,
            horizon=self.horizon,
            initial_state=self.initial_state,
            drift=drift,
            diffusion=diffusion,
            running_cost=running_cost,
            terminal_cost=self.terminal,
            drift_jac_x=drift_jac_x,
            diffusion_jac_x=diffusion_jac_x,
            running_cost_grad_x=running_cost_grad_x,
            terminal_cost_grad_x=self.terminal_grad_x,
            action_space=self.action_space,
            lipschitz_bound=self.lipschitz_bound,
            name=self.name,
        )


@dataclass(frozen=True)
class LqSpec:
    """Scalar linear-quadratic data.

    dx = (beta(t) x + control_gain a) dt + nu dW
    cost = integral (q(t) x^2 + r(t) a^2) dt + q_t x_T^2

    beta, q, r may be constants or callables of t; r must stay positive.
    """

    beta: float | Callable = 0.0
    control_gain: float = 1.0
    nu: float = 0.0
    q: float | Callable = 1.0
    r: float | Callable = 1.0
    q_t: float = 0.0
    x0: float = 1.0

    def beta_fn(self) -> Callable[[float], float]:
        return _as_time_fn(self.beta)

    def q_fn(self) -> Callable[[float], float]:
        return _as_time_fn(self.q)

    def r_fn(self) -> Callable[[float], float]:
        return _as_time_fn(self.r)

    def validate(self, horizon: float) -> None:
        r = self.r_fn()
        q = self.q_fn()
        for t in np.linspace(0.0, horizon, 33):
            if not r(t) > 0:
                raise ValueError(f"r(t) must be positive, got {r(t)} at t={t}")
            if q(t) < 0:
                raise ValueError(f"q(t) must be nonnegative, got {q(t)} at t={t}")
        if self.q_t < 0 or self.nu < 0:
            raise ValueError("q_t and nu must be nonnegative")


@dataclass(frozen=True)
class RiccatiSolution:
    """Backward Riccati solve: J* = P(0) x0^2 + c(0)."""

    optimal_value: float
    feedback_gain: Callable[[float], float]
    value_curve: tuple  # (times, p_values, c_values), ascending in t

    @property
    def p0(self) -> float:
        return float(self.value_curve[1][0])

    @property
    def c0(self) -> float:
        return float(self.value_curve[2][0])


def riccati_lq(spec: LqSpec, grid: TimeGrid, refine: int = 10) -> RiccatiSolution:
    """Solve the scalar Riccati ODE backward with classical RK4.

    P' = -2 beta P + (gain^2 / r) P^2 - q,  P(T) = q_t
    c' = -nu^2 P,                           c(T) = 0

    Integrates on a grid refine-times finer than the solver grid.
    """
    spec.validate(grid.horizon)
    beta, q, r = spec.beta_fn(), spec.q_fn(), spec.r_fn()
    gain2 = spec.control_gain * spec.control_gain
    nu2 = spec.nu * spec.nu

    def rhs(t, u):
        p_val, c_val = u
        dp = -2.0 * beta(t) * p_val + gain2 * p_val * p_val / r(t) - q(t)
        dc = -nu2 * p_val
        return np.array([dp, dc])

    n_fine = grid.n_steps * refine
    h = grid.horizon / n_fine
    times = grid.horizon - h * np.arange(n_fine + 1)  # descending from T
    u = np.empty((n_fine + 1, 2))
    u[0] = (spec.q_t, 0.0)
    for i in range(n_fine):
        t = times[i]
        k1 = rhs(t, u[i])
        k2 = rhs(t - 0.5 * h, u[i] - 0.5 * h * k1)
        k3 = rhs(t - 0.5 * h, u[i] - 0.5 * h * k2)
        k4 = rhs(t - h, u[i] - h * k3)
        u[i + 1] = u[i] - (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(u[i + 1])):
            raise RuntimeError(f"Riccati integration blew up near t={t - h}")

    t_asc = times[::-1].copy()
    p_asc = u[::-1, 0].copy()
    c_asc = u[::-1, 1].copy()
    p0, c0 = float(p_asc[0]), float(c_asc[0])

    def feedback_gain(t: float) -> float:
        p_t = float(np.interp(t, t_asc, p_asc))
        return -spec.control_gain * p_t / r(t)

    return RiccatiSolution(
        optimal_value=p0 * spec.x0 * spec.x0 + c0,
        feedback_gain=feedback_gain,
        value_curve=(t_asc, p_asc, c_asc),
    )


def lq_hamiltonian_reference(spec: LqSpec, t, x, y, z, a):
    """Scalar Hamiltonian for LqSpec data, coded independently.

    Plain scalar arithmetic, no shared code with the problem module.
    """
    b = spec.beta_fn()(t) * x + spec.control_gain * a
    sig = spec.nu
    f = spec.q_fn()(t) * x * x + spec.r_fn()(t) * a * a
    return (b * y + sig * z) + f


def diffusion_lq_value(
    beta: float,
    nu0: float,
    nu1: float,
    q: float,
    r: float,
    q_t: float,
    x0: float,
    horizon: float,
    refine: int = 4000,
) -> tuple[float, Callable[[float], float]]:
    """Optimal cost for dx = beta x dt + (nu0 + nu1 a) dW with quadratic costs.

    The value function stays quadratic, V = P(t) x^2 + c(t), because the
    minimising action is state-free: a*(t) = -P nu0 nu1 / (P nu1^2 + r).
    P solves the linear ODE P' = -2 beta P - q with P(T) = q_t, and
    c' = -(P nu0^2 - (P nu0 nu1)^2 / (P nu1^2 + r)), c(T) = 0.  Returns
    (V(0, x0), a*(t)).  The action is unconstrained here; for a bounded
    grid this is a lower bound plus quantisation allowance.
    """
    if r <= 0:
        raise ValueError(f"r must be positive, got {r}")

    def rhs(t, u):
        p_val, c_val = u
        gain = p_val * nu0 * nu1
        dc = -(p_val * nu0 * nu0 - gain * gain / (p_val * nu1 * nu1 + r))
        return np.array([-2.0 * beta * p_val - q, dc])

    h = horizon / refine
    times = horizon - h * np.arange(refine + 1)
    u = np.empty((refine + 1, 2))
    u[0] = (q_t, 0.0)
    for i in range(refine):
        t = times[i]
        k1 = rhs(t, u[i])
        k2 = rhs(t - 0.5 * h, u[i] - 0.5 * h * k1)
        k3 = rhs(t - 0.5 * h, u[i] - 0.5 * h * k2)
        k4 = rhs(t - h, u[i] - h * k3)
        u[i + 1] = u[i] - (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    t_asc = times[::-1].copy()
    p_asc = u[::-1, 0].copy()
    c0 = float(u[-1, 1])
    p0 = float(u[-1, 0])

    def optimal_action(t: float) -> float:
        p_t = float(np.interp(t, t_asc, p_asc))
        return -p_t * nu0 * nu1 / (p_t * nu1 * nu1 + r)

    return p0 * x0 * x0 + c0, optimal_action


def lq_adjoint_y0(
    spec: LqSpec,
    horizon: float,
    action: float = 0.0,
    feedback: float = 0.0,
    refine: int = 4000,
) -> float:
    """Adjoint value Y_0 for the LQ problem under a = action + feedback * x.

    The adjoint driver keeps D_x b = beta regardless of the feedback (the
    control enters the driver as a process, not through x), so only the
    state mean m(t) sees the feedback: m' = beta m + gain (action +
    feedback m).  The fundamental solution s(t) = exp(integral beta) and
    Y_0 = s(T) 2 q_t m(T) + integral s(t) 2 q(t) m(t) dt.  Solved by RK4
    at a resolution unrelated to the solver grid.
    """
    beta, q = spec.beta_fn(), spec.q_fn()
    abar = float(action)
    fb = float(feedback)

    def rhs(t, u):
        m_val, s_val, acc = u
        return np.array(
            [
                beta(t) * m_val + spec.control_gain * (abar + fb * m_val),
                beta(t) * s_val,
                s_val * 2.0 * q(t) * m_val,
            ]
        )

    h = horizon / refine
    u = np.array([spec.x0, 1.0, 0.0])
    for i in range(refine):
        t = i * h
        k1 = rhs(t, u)
        k2 = rhs(t + 0.5 * h, u + 0.5 * h * k1)
        k3 = rhs(t + 0.5 * h, u + 0.5 * h * k2)
        k4 = rhs(t + h, u + h * k3)
        u = u + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    m_t, s_t, acc = u
    return float(s_t * 2.0 * spec.q_t * m_t + acc)


@dataclass(frozen=True)
class BruteForceResult:
    j_star: float
    best_sequence: np.ndarray
    standard_error: float
    n_sequences: int


def brute_force_optimal(
    p: ControlProblem,
    grid: TimeGrid,
    noise: NoiseBank,
    actions: ActionSpace | None = None,
    max_sequences: int = 1_000_000,
) -> BruteForceResult:
    """Exhaustive minimum of the estimated cost over deterministic controls.

    Enumerates every time-indexed action sequence, estimates J for each
    on the shared noise bank, and returns the minimum.  The minimum value
    is independent of enumeration order; on exact ties the first sequence
    in lexicographic index order is kept.
    """
    space = actions if actions is not None else p.action_space
    n_act = space.n_actions
    n = grid.n_steps
    m = noise.n_paths
    total = n_act ** n
    if total > max_sequences:
        raise ValueError(
            f"{n_act}^{n} = {total} sequences exceeds the budget {max_sequences}"
        )
    dt = grid.dt
    nodes = grid.nodes
    points = space.points
    inc = noise.increments
    d = p.state_dim

    chunk_rows = max(1, 500_000 // max(1, m))
    best_j = np.inf
    best_se = 0.0
    best_seq = None
    it = itertools.product(range(n_act), repeat=n)
    count = 0
    while True:
        block = list(itertools.islice(it, chunk_rows))
        if not block:
            break
        seqs = np.array(block, dtype=np.int64)
        c = seqs.shape[0]
        count += c
        x = np.broadcast_to(p.initial_state, (c, m, d)).copy()
        cost = np.zeros((c, m))
        for k in range(n):
            a = np.broadcast_to(points[seqs[:, k]][:, None, :], (c, m, points.shape[1]))
            t = float(nodes[k])
            cost += np.asarray(p.running_cost(t, x, a)) * dt
            b = np.asarray(p.drift(t, x, a))
            sig = np.asarray(p.diffusion(t, x, a))
            x = x + b * dt + np.einsum("cmjp,mp->cmj", sig, inc[:, k])
        cost += np.asarray(p.terminal_cost(x))
        means = cost.mean(axis=1)
        ses = cost.std(axis=1, ddof=1) / np.sqrt(m) if m > 1 else np.zeros(c)
        j = int(means.argmin())
        if means[j] < best_j:
            best_j = float(means[j])
            best_se = float(ses[j])
            best_seq = seqs[j].copy()
    return BruteForceResult(
        j_star=best_j,
        best_sequence=best_seq,
        standard_error=best_se,
        n_sequences=count,
    )


# --- benchmark suite ------------------------------------------------------

@dataclass(frozen=True)
class Benchmark:
    """A named problem plus whatever oracle data applies to it.

    continuous_optimum is the optimal cost of the continuous-time,
    unconstrained-action problem when an ODE oracle exists; the solver's
    grid-restricted value sits above it by discretisation bias.
    """

    name: str
    problem: ControlProblem
    structured: StructuredProblem
    lq: LqSpec | None = None
    continuous_optimum: float | None = None
    notes: str = ""


def scalar_quadratic_problem(
    name: str,
    horizon: float,
    x0: float,
    beta: float,
    drift_gain: float,
    sigma_const: float,
    sigma_gain: float,
    q: float,
    r: float,
    q_t: float,
    action_points: np.ndarray,
) -> StructuredProblem:
    """Scalar benchmark family: affine coefficients, quadratic costs.

    b = beta x + drift_gain a; sigma = sigma_const + sigma_gain a;
    f = q x^2 + r a^2; g = q_t x^2.
    """

    b1_mat = np.array([[beta]])
    s1_tensor = np.zeros((1, 1, 1))

    def b2(t, a):
        return drift_gain * a

    def sigma2(t, a):
        return sigma_const + sigma_gain * a[..., None, :]

    def f1(t, x):
        return q * x[..., 0] * x[..., 0]

    def f1_grad(t, x):
        return 2.0 * q * x

    def f2(t, a):
        return r * a[..., 0] * a[..., 0]

    def terminal(x):
        return q_t * x[..., 0] * x[..., 0]

    def terminal_grad(x):
        return 2.0 * q_t * x

    return StructuredProblem(
        state_dim=1,
        noise_dim=1,
        horizon=horizon,
        initial_state=np.array([x0]),
        b1=lambda t: b1_mat,
        b2=b2,
        sigma1=lambda t: s1_tensor,
        sigma2=sigma2,
        f1=f1,
        f1_grad_x=f1_grad,
        f2=f2,
        terminal=terminal,
        terminal_grad_x=terminal_grad,
        action_space=ActionSpace(points=action_points),
        name=name,
    )


# Pinned benchmark instances.  The stress instance was found empirically:
# with the penalty frozen at zero its update overshoots through the large
# drift gain and the cost oscillates upward within a few iterations.
_LQ_DRIFT = dict(beta=0.2, gain=1.0, nu=0.2, q=1.0, r=1.0, q_t=0.5, x0=1.0, horizon=1.0)
_CTRL_DIFFUSION = dict(
    beta=0.2, nu0=0.6, nu1=0.3, q=1.0, r=0.45, q_t=0.3, x0=1.0, horizon=1.0
)
_MSA_STRESS = dict(kappa=3.0, nu=1.0, eps=0.1, q_t=1.0, x0=1.0, horizon=1.0)

_WIDE_GRID = np.linspace(-2.0, 2.0, 21)
_SMALL_GRID = np.linspace(-1.0, 1.0, 3)


def _make_lq_drift(grid_points: np.ndarray, name: str) -> Benchmark:
    c = _LQ_DRIFT
    sp = scalar_quadratic_problem(
        name,
        horizon=c["horizon"],
        x0=c["x0"],
        beta=c["beta"],
        drift_gain=c["gain"],
        sigma_const=c["nu"],
        sigma_gain=0.0,
        q=c["q"],
        r=c["r"],
        q_t=c["q_t"],
        action_points=grid_points,
    )
    lq = LqSpec(
        beta=c["beta"],
        control_gain=c["gain"],
        nu=c["nu"],
        q=c["q"],
        r=c["r"],
        q_t=c["q_t"],
        x0=c["x0"],
    )
    ric = riccati_lq(lq, TimeGrid(n_steps=50, horizon=c["horizon"]))
    return Benchmark(
        name=name,
        problem=sp.assemble(),
        structured=sp,
        lq=lq,
        continuous_optimum=ric.optimal_value,
        notes="control in the drift only; Riccati-verifiable",
    )


def _make_ctrl_diffusion(grid_points: np.ndarray, name: str) -> Benchmark:
    c = _CTRL_DIFFUSION
    sp = scalar_quadratic_problem(
        name,
        horizon=c["horizon"],
        x0=c["x0"],
        beta=c["beta"],
        drift_gain=0.0,
        sigma_const=c["nu0"],
        sigma_gain=c["nu1"],
        q=c["q"],
        r=c["r"],
        q_t=c["q_t"],
        action_points=grid_points,
    )
    j_star, _ = diffusion_lq_value(
        beta=c["beta"],
        nu0=c["nu0"],
        nu1=c["nu1"],
        q=c["q"],
        r=c["r"],
        q_t=c["q_t"],
        x0=c["x0"],
        horizon=c["horizon"],
    )
    return Benchmark(
        name=name,
        problem=sp.assemble(),
        structured=sp,
        lq=None,
        continuous_optimum=j_star,
        notes="control enters the diffusion; verified by brute force",
    )


def _make_msa_stress() -> Benchmark:
    c = _MSA_STRESS
    sp = scalar_quadratic_problem(
        "msa_stress",
        horizon=c["horizon"],
        x0=c["x0"],
        beta=0.0,
        drift_gain=c["kappa"],
        sigma_const=c["nu"],
        sigma_gain=0.0,
        q=0.0,
        r=c["eps"],
        q_t=c["q_t"],
        action_points=_WIDE_GRID,
    )
    return Benchmark(
        name="msa_stress",
        problem=sp.assemble(),
        structured=sp,
        lq=None,
        notes="strong control-to-adjoint coupling; unpenalised updates oscillate",
    )


_FACTORIES: dict[str, Callable[[], Benchmark]] = {
    "lq_drift": lambda: _make_lq_drift(_WIDE_GRID, "lq_drift"),
    "lq_drift_small": lambda: _make_lq_drift(_SMALL_GRID, "lq_drift_small"),
    "ctrl_diffusion": lambda: _make_ctrl_diffusion(_WIDE_GRID, "ctrl_diffusion"),
    "ctrl_diffusion_small": lambda: _make_ctrl_diffusion(
        _SMALL_GRID, "ctrl_diffusion_small"
    ),
    "msa_stress": lambda: _make_msa_stress(),
}

_SUITE_NAMES = ("lq_drift", "ctrl_diffusion", "msa_stress")


def register_benchmark(name: str, factory: Callable[[], Benchmark]) -> None:
    """Expose a problem to the CLI by name (tests and user problems)."""
    _FACTORIES[name] = factory


def benchmark_names() -> list[str]:
    return sorted(_FACTORIES)


def get_benchmark(name: str) -> Benchmark:
    try:
        factory = _FACTORIES[name]
    except KeyError:
        raise KeyError(
            f"unknown benchmark {name!r}; known: {', '.join(benchmark_names())}"
        ) from None
    return factory()


def benchmark_suite() -> list[Benchmark]:
    """The named problems exercised by the acceptance criteria."""
    return [get_benchmark(name) for name in _SUITE_NAMES]
