"""Parameterized contaminant-control environment on the unit square.

A concentration field driven by advection-diffusion must be kept out of
the right-hand target strip at final time.  The two controls scale a sink
profile and move its vertical position.  Problem instances are drawn by
randomizing the contaminant source location (horizontal setup) plus the
velocity-field phase (sinusoidal setup).

Time stepping is implicit Euler: one sparse solve per step, counted by a
shared :class:`SolveCounter` so training methods can be compared by how
many PDE solves they consume.
"""

from __future__ import annotations

import csv
import struct
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from pdepolicy import fem
from pdepolicy import tape as tp
from pdepolicy.fem import GridSpec

HORIZONTAL = "horizontal"
SINUSOIDAL = "sinusoidal"

Y_X1_RANGE = (0.1, 0.25)
Y_X2_RANGE = (0.2, 0.8)
Y_V_RANGE = (-0.425, 0.0)

ALPHA_INIT = 0.5

DEFAULT_KAPPA = 0.008
DEFAULT_RHO = 40.0
# Source magnitude/size differ between the two setups to keep flows natural.
SOURCE_DEFAULTS = {HORIZONTAL: (5.0, 0.01), SINUSOIDAL: (0.5, 0.025)}


class SolveCounter:
    """Thread-safe accumulator of implicit-Euler linear solves."""

    def __init__(self):
        self._lock = threading.Lock()
        self._count = 0

    def increment(self, k: int = 1) -> None:
        with self._lock:
            self._count += k

    @property
    def value(self) -> int:
        return self._count

    def reset(self) -> None:
        with self._lock:
            self._count = 0


GLOBAL_SOLVES = SolveCounter()


@dataclass(frozen=True)
class ProblemParams:
    """One realization y of the problem family."""

    y_x1: float
    y_x2: float
    y_v: float | None = None
    setup: str = HORIZONTAL

    def __post_init__(self):
        if self.setup not in (HORIZONTAL, SINUSOIDAL):
            raise ValueError(f"unknown setup {self.setup!r}")
        if not (Y_X1_RANGE[0] <= self.y_x1 <= Y_X1_RANGE[1]):
            raise ValueError(f"y_x1={self.y_x1} outside {Y_X1_RANGE}")
        if not (Y_X2_RANGE[0] <= self.y_x2 <= Y_X2_RANGE[1]):
            raise ValueError(f"y_x2={self.y_x2} outside {Y_X2_RANGE}")
        if self.setup == SINUSOIDAL:
            if self.y_v is None or not (Y_V_RANGE[0] <= self.y_v <= Y_V_RANGE[1]):
                raise ValueError(f"y_v={self.y_v} outside {Y_V_RANGE}")

    @property
    def vector(self) -> np.ndarray:
        """Parameter block as fed to networks (2 floats, 3 for sinusoidal)."""
        if self.setup == SINUSOIDAL:
            return np.array([self.y_x1, self.y_x2, self.y_v])
        return np.array([self.y_x1, self.y_x2])


def sample_params(setup: str, rng: np.random.Generator) -> ProblemParams:
    """Draw y uniformly from the stated boxes; y_v only for sinusoidal."""
    y_x1 = rng.uniform(*Y_X1_RANGE)
    y_x2 = rng.uniform(*Y_X2_RANGE)
    y_v = rng.uniform(*Y_V_RANGE) if setup == SINUSOIDAL else None
    return ProblemParams(y_x1=y_x1, y_x2=y_x2, y_v=y_v, setup=setup)


VALIDATION_Y_X1 = (0.125, 0.225)
VALIDATION_Y_X2 = (0.25, 0.4, 0.5, 0.6, 0.75)
VALIDATION_Y_V = (-0.35, -0.2125, -0.1)


def validation_params(setup: str, small: bool = False) -> list[ProblemParams]:
    """Fixed evaluation grid: 10 problems (horizontal) or 30 (sinusoidal).

    ``small`` selects the 6-problem sinusoidal subset (both source columns,
    mid-height source, all three velocity phases) used for quick sweeps.
    """
    if setup == HORIZONTAL:
        if small:
            raise ValueError("small subset is defined for the sinusoidal setup")
        return [
            ProblemParams(y1, y2, setup=HORIZONTAL)
            for y1 in VALIDATION_Y_X1
            for y2 in VALIDATION_Y_X2
        ]
    y_x2s = (0.5,) if small else VALIDATION_Y_X2
    return [
        ProblemParams(y1, y2, y_v=yv, setup=SINUSOIDAL)
        for y1 in VALIDATION_Y_X1
        for y2 in y_x2s
        for yv in VALIDATION_Y_V
    ]


def velocity_field(setup: str, params: ProblemParams | None = None) -> Callable:
    if setup == HORIZONTAL:
        return fem.horizontal_velocity
    if params is None or params.y_v is None:
        raise ValueError("sinusoidal velocity needs y_v")
    return fem.sinusoidal_velocity(params.y_v)


def velocity(setup: str, params: ProblemParams | None, x1, x2) -> np.ndarray:
    """Velocity vector(s) at point(s); horizontal ignores the parameters."""
    return velocity_field(setup, params)(x1, x2)


@dataclass(frozen=True)
class State:
    """Concentration coefficients plus the sink's vertical position."""

    a: np.ndarray
    alpha: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.a)) or not np.isfinite(self.alpha):
            raise FloatingPointError("non-finite state")

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.a, [self.alpha]])


class FemSystem:
    """Assembled matrices and factorizations for one (params, step-size).

    Immutable after construction; shareable across threads and tapes.
    """

    def __init__(
        self,
        params: ProblemParams,
        grid: GridSpec,
        ds: float,
        kappa: float = DEFAULT_KAPPA,
        c: float | None = None,
        sigma_s: float | None = None,
        counter: SolveCounter | None = None,
        velocity_fn: Callable | None = None,
        stabilize: bool = True,
    ):
        if grid.n < 4:
            raise ValueError("grid too coarse to assemble (need n >= 4)")
        c_default, sigma_default = SOURCE_DEFAULTS[params.setup]
        self.params = params
        self.grid = grid
        self.ds = float(ds)
        self.kappa = float(kappa)
        self.c = c_default if c is None else float(c)
        self.sigma_s = sigma_default if sigma_s is None else float(sigma_s)
        self.counter = counter if counter is not None else GLOBAL_SOLVES

        self.mass = fem.assemble_mass(grid)
        self.stiffness = fem.assemble_stiffness(grid)
        vel = velocity_fn if velocity_fn is not None else velocity_field(params.setup, params)
        self.advection = fem.assemble_advection(grid, vel)
        self.lumped = fem.lumped_mass(self.mass)

        self.source_vec = fem.source_load(
            grid.n, params.y_x1, params.y_x2, self.c, self.sigma_s
        )
        self._sink_x1 = fem.sink_load_x1_factor(grid.n)
        # kappa*K + C (+ stabilization) defines both the implicit operator and
        # the drift, so stepping, adjoints, and the Hamiltonian stay consistent.
        transport = self.kappa * self.stiffness.mat + self.advection.mat
        if stabilize:
            transport = transport + fem.assemble_streamline_diffusion(
                grid, vel, self.kappa
            ).mat
        self.transport = tp.SparseMatrix(transport, symmetric=False)
        self.implicit_op = tp.FactorizedOperator(
            self.mass.mat + self.ds * self.transport.mat
        )
        self.mass_op = tp.FactorizedOperator(self.mass.mat)

    @property
    def state_dim(self) -> int:
        return self.grid.num_nodes + 1

    def sink_vector(self, alpha: float) -> np.ndarray:
        """Exactly integrated sink load at vertical position alpha."""
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"alpha={alpha} outside [0, 1]")
        fy, _ = fem.sink_load_factors(self.grid.n, alpha)
        return np.outer(self._sink_x1, fy).ravel()

    def sink_vector_dalpha(self, alpha: float) -> np.ndarray:
        _, dfy = fem.sink_load_factors(self.grid.n, alpha)
        return np.outer(self._sink_x1, dfy).ravel()

    def sink_with_derivative(self, alpha: float):
        fy, dfy = fem.sink_load_factors(self.grid.n, alpha)
        return np.outer(self._sink_x1, fy).ravel(), np.outer(self._sink_x1, dfy).ravel()

    def sink_on_tape(self, alpha: tp.Node) -> tp.Node:
        value, jac = self.sink_with_derivative(float(alpha.value))
        return tp.from_scalar(alpha, value, jac)

    def initial_state(self) -> State:
        return State(a=np.zeros(self.grid.num_nodes), alpha=ALPHA_INIT)

    # -- time stepping ------------------------------------------------------

    def step(self, state: State, u: np.ndarray) -> State:
        """One implicit-Euler step; the sink is taken at the updated alpha."""
        u = np.asarray(u, dtype=np.float64)
        if u.shape != (2,) or not np.all(np.isfinite(u)):
            raise ValueError(f"control must be a finite 2-vector, got {u!r}")
        alpha_next = float(np.clip(state.alpha + u[1] * self.ds, 0.0, 1.0))
        load = self.source_vec + u[0] * self.sink_vector(alpha_next)
        rhs = self.mass.mat @ state.a + self.ds * load
        a_next = self.implicit_op.solve(rhs)
        self.counter.increment()
        return State(a=a_next, alpha=alpha_next)

    def step_on_tape(self, a: tp.Node, alpha: tp.Node, u1: tp.Node, u2: tp.Node):
        """Tape twin of :meth:`step`; counts a solve exactly like it."""
        alpha_next = tp.clamp(tp.add(alpha, tp.mul(u2, self.ds)), 0.0, 1.0)
        sink = self.sink_on_tape(alpha_next)
        load = tp.add(tp.mul(u1, sink), self.source_vec)
        rhs = tp.add(tp.matvec(self.mass, a), tp.mul(load, self.ds))
        a_next = tp.solve(self.implicit_op, rhs)
        self.counter.increment()
        return a_next, alpha_next

    # -- continuous-time drift pieces used by the Hamiltonian ----------------

    def drift_rhs(self, a: np.ndarray) -> np.ndarray:
        """Right-hand side of M da/ds = -(kappa*K + C) a + source."""
        return self.source_vec - self.transport.mat @ a

    def drift_rhs_on_tape(self, a: tp.Node) -> tp.Node:
        return tp.add(tp.neg(tp.matvec(self.transport, a)), self.source_vec)


def assemble(
    params: ProblemParams,
    grid: GridSpec,
    ds: float,
    kappa: float = DEFAULT_KAPPA,
    c: float | None = None,
    sigma_s: float | None = None,
    counter: SolveCounter | None = None,
) -> FemSystem:
    """Build the full per-instance system (factorized once, reused everywhere)."""
    return FemSystem(params, grid, ds, kappa=kappa, c=c, sigma_s=sigma_s, counter=counter)


# ---------------------------------------------------------------------------
# costs and episodes


def running_cost(u: np.ndarray, ds: float) -> float:
    """Quadratic control effort for one step: (ds/2) |u|^2."""
    u = np.asarray(u, dtype=np.float64)
    return 0.5 * ds * float(u @ u)


def terminal_cost(a: np.ndarray, grid: GridSpec, rho: float = DEFAULT_RHO) -> float:
    """rho * sum over target nodes of max(a, 0) * dx^2."""
    a = np.asarray(a, dtype=np.float64)
    return rho * grid.dx**2 * float(np.sum(np.maximum(a[grid.target_mask], 0.0)))


def terminal_cost_grad(a: np.ndarray, grid: GridSpec, rho: float = DEFAULT_RHO) -> np.ndarray:
    """Gradient of the terminal cost w.r.t. a (zero on the flat side of max)."""
    g = np.zeros_like(a)
    active = grid.target_mask & (a > 0.0)
    g[active] = rho * grid.dx**2
    return g


@dataclass
class EpisodeRecord:
    """Full trajectory of one episode plus its objective bookkeeping."""

    times: np.ndarray  # (N+1,)
    states: list[State]  # N+1 entries
    controls: np.ndarray  # (N, 2)
    rewards: np.ndarray  # (N+1,): step costs, terminal cost last
    running_sum: float
    terminal: float
    objective: float
    params: ProblemParams
    ds: float
    rho: float

    @property
    def num_steps(self) -> int:
        return len(self.controls)

    def recompute_objective(self, grid: GridSpec) -> float:
        run = sum(running_cost(u, self.ds) for u in self.controls)
        return run + terminal_cost(self.states[-1].a, grid, self.rho)


class ControlEpisode:
    """reset()/step() interface over one problem instance.

    ``step`` returns (state, reward, done) where the reward is the running
    cost of the step, plus the terminal cost when the horizon is reached.
    """

    def __init__(self, sys: FemSystem, num_steps: int, rho: float = DEFAULT_RHO):
        self.sys = sys
        self.num_steps = num_steps
        self.rho = rho
        self.state: State | None = None
        self.index = 0

    @property
    def time(self) -> float:
        return self.index * self.sys.ds

    def reset(self) -> State:
        self.state = self.sys.initial_state()
        self.index = 0
        return self.state

    def step(self, u: np.ndarray):
        if self.state is None or self.index >= self.num_steps:
            raise RuntimeError("episode not running; call reset()")
        self.state = self.sys.step(self.state, u)
        self.index += 1
        reward = running_cost(u, self.sys.ds)
        done = self.index == self.num_steps
        if done:
            reward += terminal_cost(self.state.a, self.sys.grid, self.rho)
        return self.state, reward, done


def rollout(
    sys: FemSystem,
    policy: Callable[[float, State, np.ndarray], np.ndarray],
    num_steps: int,
    rho: float = DEFAULT_RHO,
    t0: float = 0.0,
) -> EpisodeRecord:
    """Run one episode from the standard reset under a feedback policy.

    ``policy(s, state, y)`` returns the 2-vector control.  Rewards follow
    the environment contract: each step pays its running cost, and the
    final entry holds the terminal cost.
    """
    y = sys.params.vector
    state = sys.initial_state()
    times = t0 + sys.ds * np.arange(num_steps + 1)
    states = [state]
    controls = np.zeros((num_steps, 2))
    rewards = np.zeros(num_steps + 1)
    for i in range(num_steps):
        u = np.asarray(policy(times[i], state, y), dtype=np.float64)
        state = sys.step(state, u)
        controls[i] = u
        rewards[i] = running_cost(u, sys.ds)
        states.append(state)
    rewards[num_steps] = terminal_cost(state.a, sys.grid, rho)
    running_sum = float(rewards[:num_steps].sum())
    return EpisodeRecord(
        times=times,
        states=states,
        controls=controls,
        rewards=rewards,
        running_sum=running_sum,
        terminal=float(rewards[num_steps]),
        objective=running_sum + float(rewards[num_steps]),
        params=sys.params,
        ds=sys.ds,
        rho=rho,
    )


def zero_policy(s, state, y):
    return np.zeros(2)


# ---------------------------------------------------------------------------
# episode dumps consumed by the plotting tool

SNAPSHOT_MAGIC = b"PDGRID1\x00"


def dump_episode_csv(path, record: EpisodeRecord) -> None:
    """One row per step: s, alpha, u1, u2, r (terminal row has no control)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["s", "alpha", "u1", "u2", "r"])
        for i in range(record.num_steps):
            writer.writerow(
                [
                    f"{record.times[i]:.12g}",
                    f"{record.states[i].alpha:.12g}",
                    f"{record.controls[i][0]:.12g}",
                    f"{record.controls[i][1]:.12g}",
                    f"{record.rewards[i]:.12g}",
                ]
            )
        writer.writerow(
            [
                f"{record.times[-1]:.12g}",
                f"{record.states[-1].alpha:.12g}",
                "",
                "",
                f"{record.rewards[-1]:.12g}",
            ]
        )


def dump_snapshots(path, grid: GridSpec, fields: Sequence[np.ndarray]) -> None:
    """Flat binary frames: magic, (rows, cols) header, float64 grids."""
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(struct.pack("<II", grid.n, grid.n))
        for a in fields:
            img = grid.to_image(np.asarray(a, dtype=np.float64))
            fh.write(img.astype("<f8").tobytes())


def load_snapshots(path) -> tuple[int, np.ndarray]:
    """Read a snapshot dump; returns (n, frames) with frames (k, n, n)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(SNAPSHOT_MAGIC))
        if magic != SNAPSHOT_MAGIC:
            raise ValueError("not a concentration-snapshot file")
        rows, cols = struct.unpack("<II", fh.read(8))
        raw = fh.read()
    frame_bytes = rows * cols * 8
    if len(raw) % frame_bytes:
        raise ValueError("truncated snapshot file")
    frames = np.frombuffer(raw, dtype="<f8").reshape(-1, rows, cols)
    return rows, frames
