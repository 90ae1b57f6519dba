"""Model-based training: feedback rollouts with dynamic-programming penalties.

The value surrogate is trained by rolling the closed-loop system forward
(control from the feedback form u = -g^T grad_z phi), accumulating the
control objective, and penalizing (i) the pointwise residual of the
minimizing-control equation

    d_s phi + grad_z phi . f - 1/2 |g^T grad_z phi|^2 = 0

along the trajectory, (ii) the terminal value mismatch |G - phi(T)|, and
(iii) the terminal gradient mismatch in the 1-norm.  The whole loss is
recorded on one tape per episode, so a single reverse sweep yields the
exact discrete weight gradient through the implicit-Euler solves, the
feedback form, and the network's analytic input gradient.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from pdepolicy import tape as tp
from pdepolicy.env import (
    DEFAULT_RHO,
    EpisodeRecord,
    FemSystem,
    State,
    running_cost,
    terminal_cost,
    terminal_cost_grad,
)
from pdepolicy.network import NetInput, ValueNetwork
from pdepolicy.optim import Adam, decayed_lr


@dataclass
class HjbConfig:
    """Penalty weights, learning-rate schedule, and batching for training."""

    beta1: float = 1.0
    beta2: float = 1.0
    beta3: float = 1.0
    lr0: float = 0.075
    decay: float = 0.975
    lr_floor: float = 0.0025
    batch_size: int = 20
    pool_size: int = 64
    iterations: int = 200
    seed: int = 0
    workers: int = 1
    max_grad_norm: float = 0.0   # 0 disables clipping
    control_clamp: float = 0.0   # saturate training-rollout controls; 0 = off
    warmup_iterations: int = 0   # linear learning-rate ramp-in

    def __post_init__(self):
        if min(self.beta1, self.beta2, self.beta3) < 0:
            raise ValueError("penalty weights must be nonnegative")
        if self.lr_floor > self.lr0:
            raise ValueError("lr_floor exceeds lr0")
        if self.batch_size > self.pool_size:
            raise ValueError("batch size exceeds problem-pool size")


@dataclass
class HjbLossBreakdown:
    """Objective plus the three penalty components of one episode/batch."""

    objective: float
    residual_term: float
    terminal_value_term: float
    terminal_grad_term: float

    @property
    def total(self) -> float:
        return (
            self.objective
            + self.residual_term
            + self.terminal_value_term
            + self.terminal_grad_term
        )


def pointwise_residual(dphi_ds, grad_z, drift, g_t_grad) -> float:
    """|d_s phi + grad_z phi . f - 1/2 |g^T grad_z phi|^2| at one point.

    ``drift`` is the uncontrolled state velocity f(s, z; y) and ``g_t_grad``
    the control-channel projection g^T grad_z phi; the expression vanishes
    identically on the exact value function of the minimization problem.
    """
    grad_z = np.asarray(grad_z, dtype=np.float64)
    drift = np.asarray(drift, dtype=np.float64)
    g_t_grad = np.asarray(g_t_grad, dtype=np.float64)
    return float(abs(dphi_ds + grad_z @ drift - 0.5 * g_t_grad @ g_t_grad))


def hamiltonian(s: float, z: np.ndarray, p: np.ndarray, sys: FemSystem) -> float:
    """H(s, z, p) = p . f + 1/2 |g^T p|^2 (supremum over controls attained).

    The costate block for the concentration is mass-inverse weighted, so
    (g^T p)_1 = q(alpha) . M^-1 p_a and the drift is f_a = M^-1 (source -
    transport a), f_alpha = 0.
    """
    z = np.asarray(z, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if p.shape[0] != sys.state_dim:
        raise ValueError(f"costate dim {p.shape[0]} != state dim {sys.state_dim}")
    a, alpha = z[:-1], float(z[-1])
    p_a, p_alpha = p[:-1], float(p[-1])
    minv_pa = sys.mass_op.solve(p_a)
    drift_dot = minv_pa @ sys.drift_rhs(a)
    g_t_p = control_projection(sys, alpha, minv_pa, p_alpha)
    return float(drift_dot + 0.5 * g_t_p @ g_t_p)


def control_projection(sys: FemSystem, alpha: float, minv_pa: np.ndarray,
                       p_alpha: float) -> np.ndarray:
    """g(z)^T p given the mass-solved concentration costate."""
    return np.array([sys.sink_vector(alpha) @ minv_pa, p_alpha])


def feedback_control(net: ValueNetwork, s: float, state: State, y: np.ndarray,
                     sys: FemSystem) -> np.ndarray:
    """Closed-form Hamiltonian maximizer u = g^T (-grad_z phi)."""
    _, gz, _ = net.grad_input(NetInput(s, state.as_vector(), y))
    minv = sys.mass_op.solve(gz[:-1])
    return -control_projection(sys, state.alpha, minv, gz[-1])


def make_feedback_policy(net: ValueNetwork, sys: FemSystem):
    def policy(s, state, y):
        return feedback_control(net, s, state, y, sys)

    return policy


def hjb_penalty(net: ValueNetwork, episode: EpisodeRecord, sys: FemSystem,
                betas=(1.0, 1.0, 1.0), rho: float = DEFAULT_RHO) -> HjbLossBreakdown:
    """Penalty of a completed episode, recomputed pointwise (gradient-free)."""
    y = episode.params.vector
    b1, b2, b3 = betas
    residual_sum = 0.0
    for i in range(episode.num_steps):
        state = episode.states[i]
        dphi_ds, gz, _ = net.grad_input(NetInput(episode.times[i], state.as_vector(), y))
        minv = sys.mass_op.solve(gz[:-1])
        drift_dot = minv @ sys.drift_rhs(state.a)
        g_t_grad = control_projection(sys, state.alpha, minv, gz[-1])
        residual_sum += abs(dphi_ds + drift_dot - 0.5 * g_t_grad @ g_t_grad)
    final = episode.states[-1]
    t_final = episode.times[-1]
    phi_T = net.forward(NetInput(t_final, final.as_vector(), y))
    _, gz_T, _ = net.grad_input(NetInput(t_final, final.as_vector(), y))
    G = terminal_cost(final.a, sys.grid, rho)
    grad_G = terminal_cost_grad(final.a, sys.grid, rho)
    term_grad = float(np.sum(np.abs(grad_G - gz_T[:-1])) + abs(gz_T[-1]))
    return HjbLossBreakdown(
        objective=episode.objective,
        residual_term=b1 * residual_sum * episode.ds,
        terminal_value_term=b2 * abs(G - phi_T),
        terminal_grad_term=b3 * term_grad,
    )


# ---------------------------------------------------------------------------
# taped episode (training path)


def episode_on_tape(tape: tp.Tape, handle, sys: FemSystem, num_steps: int,
                    betas=(1.0, 1.0, 1.0), rho: float = DEFAULT_RHO,
                    control_clamp: float = 0.0):
    """Closed-loop rollout recorded end to end; returns (root, breakdown).

    ``handle`` is a TapeNet bound to ``tape``.  The root node is
    objective + penalty for this single episode.  ``control_clamp``
    saturates the feedback during training rollouts only, which keeps the
    closed loop bounded while the value landscape is still forming
    (gradients pass through unchanged inside the box).
    """
    grid = sys.grid
    y = sys.params.vector
    b1, b2, b3 = betas
    ds = sys.ds
    a = tape.leaf(np.zeros(grid.num_nodes))
    alpha = tape.leaf(np.float64(0.5))

    run_terms = []
    res_terms = []
    controls = []
    for i in range(num_steps):
        s_i = i * ds
        _, dphi_ds, grad_a, grad_alpha, _ = handle.forward_and_grads(s_i, a, alpha, y)
        minv_ga = tp.solve(sys.mass_op, grad_a)
        q_i = sys.sink_on_tape(alpha)
        u1 = tp.neg(tp.dot(q_i, minv_ga))
        u2 = tp.neg(grad_alpha)
        if control_clamp > 0:
            u1 = tp.clamp(u1, -control_clamp, control_clamp)
            u2 = tp.clamp(u2, -control_clamp, control_clamp)
        usq = tp.add(tp.mul(u1, u1), tp.mul(u2, u2))
        run_terms.append(tp.mul(usq, 0.5 * ds))

        grad_dot_f = tp.dot(minv_ga, sys.drift_rhs_on_tape(a))
        res = tp.absval(tp.add(dphi_ds, tp.sub(grad_dot_f, tp.mul(usq, 0.5))))
        res_terms.append(res)

        controls.append((u1, u2))
        a, alpha = sys.step_on_tape(a, alpha, u1, u2)

    t_final = num_steps * ds
    phi_T, _, grad_a_T, grad_alpha_T, _ = handle.forward_and_grads(t_final, a, alpha, y)
    target = grid.target_mask
    G = tp.mul(tp.vsum(tp.relu(tp.getitem(a, target))), rho * grid.dx**2)
    grad_G = terminal_cost_grad(a.value, grid, rho)
    term_val = tp.absval(tp.sub(G, phi_T))
    term_grad = tp.add(
        tp.vsum(tp.absval(tp.sub(grad_G, grad_a_T))), tp.absval(grad_alpha_T)
    )

    objective = tp.add(tp.vsum(tp.concat(run_terms)), G)
    residual = tp.mul(tp.vsum(tp.concat(res_terms)), b1 * ds)
    penalty = tp.add(tp.add(residual, tp.mul(term_val, b2)), tp.mul(term_grad, b3))
    root = tp.add(objective, penalty)
    breakdown = HjbLossBreakdown(
        objective=float(objective.value),
        residual_term=float(residual.value),
        terminal_value_term=float(b2 * term_val.value),
        terminal_grad_term=float(b3 * term_grad.value),
    )
    return root, breakdown


def rollout_loss(net: ValueNetwork, sys: FemSystem, num_steps: int,
                 betas=(1.0, 1.0, 1.0), rho: float = DEFAULT_RHO,
                 want_grads: bool = True, control_clamp: float = 0.0):
    """Loss of one closed-loop episode and, optionally, its weight gradient."""
    tape = tp.Tape()
    handle = net.bind(tape)
    root, breakdown = episode_on_tape(tape, handle, sys, num_steps, betas, rho,
                                      control_clamp)
    if not want_grads:
        return float(root.value), breakdown, None
    grads = handle.gradients(tape.backward(root))
    return float(root.value), breakdown, grads


# ---------------------------------------------------------------------------
# trainer


class HjbTrainer:
    """Adam loop over feedback rollouts sampled from a pre-assembled pool."""

    def __init__(self, net: ValueNetwork, pool: list[FemSystem], config: HjbConfig,
                 num_steps: int, rho: float = DEFAULT_RHO):
        if len(pool) != config.pool_size:
            raise ValueError(f"pool has {len(pool)} systems, config says {config.pool_size}")
        self.net = net
        self.pool = pool
        self.config = config
        self.num_steps = num_steps
        self.rho = rho
        self.optimizer = Adam(net.weights, lr=config.lr0)
        self.rng = np.random.default_rng(config.seed)
        self.iteration = 0

    def _episode(self, sys: FemSystem):
        betas = (self.config.beta1, self.config.beta2, self.config.beta3)
        return rollout_loss(self.net, sys, self.num_steps, betas, self.rho,
                            control_clamp=self.config.control_clamp)

    def step(self) -> dict:
        """One training iteration; returns the metrics row for this step."""
        cfg = self.config
        idx = self.rng.integers(0, cfg.pool_size, size=cfg.batch_size)
        systems = [self.pool[i] for i in idx]
        try:
            if cfg.workers > 1:
                with ThreadPoolExecutor(max_workers=cfg.workers) as ex:
                    results = list(ex.map(self._episode, systems))
            else:
                results = [self._episode(sys) for sys in systems]
        except FloatingPointError as exc:
            raise FloatingPointError(
                f"non-finite training loss at iteration {self.iteration}: {exc}; "
                f"lr={decayed_lr(cfg.lr0, cfg.decay, cfg.lr_floor, self.iteration):.4g}, "
                f"weight scale={max(np.abs(v).max() for v in self.net.weights.values()):.4g}"
            ) from exc

        mean_grads = {k: np.zeros_like(v) for k, v in self.net.weights.items()}
        agg = np.zeros(4)
        for _, breakdown, grads in results:
            for k in mean_grads:
                mean_grads[k] += grads[k]
            agg += [
                breakdown.objective,
                breakdown.residual_term,
                breakdown.terminal_value_term,
                breakdown.terminal_grad_term,
            ]
        for k in mean_grads:
            mean_grads[k] /= cfg.batch_size
        agg /= cfg.batch_size
        if cfg.max_grad_norm > 0:
            total = np.sqrt(sum(float(np.sum(g * g)) for g in mean_grads.values()))
            if total > cfg.max_grad_norm:
                scale = cfg.max_grad_norm / total
                for k in mean_grads:
                    mean_grads[k] *= scale

        lr = decayed_lr(cfg.lr0, cfg.decay, cfg.lr_floor,
                        max(0, self.iteration - cfg.warmup_iterations))
        if cfg.warmup_iterations and self.iteration < cfg.warmup_iterations:
            lr *= (self.iteration + 1) / cfg.warmup_iterations
        self.optimizer.step(mean_grads, lr=lr)
        self.iteration += 1
        return {
            "iteration": self.iteration,
            "lr": lr,
            "mean_objective": agg[0],
            "residual_term": agg[1],
            "terminal_value_term": agg[2],
            "terminal_grad_term": agg[3],
            "mean_total": float(agg.sum()),
        }


def validate(net: ValueNetwork, systems: list[FemSystem], num_steps: int,
             rho: float = DEFAULT_RHO):
    """Mean and per-problem objective of closed-loop rollouts (no gradients)."""
    per_problem = np.zeros(len(systems))
    for i, sys in enumerate(systems):
        state = sys.initial_state()
        y = sys.params.vector
        total = 0.0
        for k in range(num_steps):
            u = feedback_control(net, k * sys.ds, state, y, sys)
            total += running_cost(u, sys.ds)
            state = sys.step(state, u)
        per_problem[i] = total + terminal_cost(state.a, sys.grid, rho)
    return float(per_problem.mean()), per_problem
