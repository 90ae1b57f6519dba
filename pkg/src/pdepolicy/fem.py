"""P1 finite elements on a structured triangulation of the unit square.

The unit square is covered by an n x n node grid (spacing 1/(n-1)); each
cell is split along its lower-left/upper-right diagonal into two linear
triangles.  Mass and stiffness matrices use exact P1 quadrature; the
advection matrix uses one-point (centroid) quadrature of the velocity
field; source and sink load vectors use lumped (nodal) quadrature.
Boundary conditions are homogeneous Neumann throughout, so there are no
boundary terms and the stiffness matrix annihilates constants.

Node (ix, iy) sits at (ix*dx, iy*dx) and flattens to index ix*n + iy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from pdepolicy.tape import SparseMatrix

TARGET_X1 = 0.75  # concentration right of this line is penalized at final time


@dataclass(frozen=True)
class GridSpec:
    """Uniform n x n node grid on [0,1]^2 with the target-region mask."""

    n: int
    dx: float = field(init=False)
    x1: np.ndarray = field(init=False)
    x2: np.ndarray = field(init=False)
    target_mask: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("grid needs at least 2 nodes per side")
        dx = 1.0 / (self.n - 1)
        ix, iy = np.meshgrid(np.arange(self.n), np.arange(self.n), indexing="ij")
        object.__setattr__(self, "dx", dx)
        object.__setattr__(self, "x1", (ix * dx).ravel())
        object.__setattr__(self, "x2", (iy * dx).ravel())
        object.__setattr__(self, "target_mask", self.x1 > TARGET_X1)

    @property
    def num_nodes(self) -> int:
        return self.n * self.n

    def to_image(self, a: np.ndarray) -> np.ndarray:
        """Nodal vector -> (n, n) array indexed [ix, iy]."""
        return np.asarray(a).reshape(self.n, self.n)


def triangles(grid: GridSpec) -> np.ndarray:
    """Vertex index triples, two triangles per cell, (2*(n-1)^2, 3)."""
    n = grid.n
    cx, cy = np.meshgrid(np.arange(n - 1), np.arange(n - 1), indexing="ij")
    v00 = (cx * n + cy).ravel()
    v10 = v00 + n
    v01 = v00 + 1
    v11 = v10 + 1
    lower = np.stack([v00, v10, v11], axis=1)
    upper = np.stack([v00, v11, v01], axis=1)
    return np.concatenate([lower, upper], axis=0)


def _element_geometry(grid: GridSpec, tris: np.ndarray):
    """Areas, centroids, and barycentric gradients for every triangle."""
    px = grid.x1[tris]  # (T, 3)
    py = grid.x2[tris]
    x0, x1, x2 = px[:, 0], px[:, 1], px[:, 2]
    y0, y1, y2 = py[:, 0], py[:, 1], py[:, 2]
    det = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
    area = 0.5 * np.abs(det)
    # grad(lambda_i) = (b_i, c_i) with cyclic vertex differences
    b = np.stack([y1 - y2, y2 - y0, y0 - y1], axis=1) / det[:, None]
    c = np.stack([x2 - x1, x0 - x2, x1 - x0], axis=1) / det[:, None]
    centroid = np.stack([px.mean(axis=1), py.mean(axis=1)], axis=1)
    return area, b, c, centroid


def assemble_mass(grid: GridSpec) -> SparseMatrix:
    tris = triangles(grid)
    area, _, _, _ = _element_geometry(grid, tris)
    local = (np.ones((3, 3)) + np.eye(3)) / 12.0  # exact P1 mass
    rows = np.repeat(tris, 3, axis=1).ravel()
    cols = np.tile(tris, (1, 3)).ravel()
    vals = (area[:, None, None] * local[None, :, :]).ravel()
    mat = sp.coo_matrix((vals, (rows, cols)), shape=(grid.num_nodes,) * 2)
    return SparseMatrix(mat.tocsr(), symmetric=True)


def assemble_stiffness(grid: GridSpec) -> SparseMatrix:
    tris = triangles(grid)
    area, b, c, _ = _element_geometry(grid, tris)
    local = area[:, None, None] * (
        b[:, :, None] * b[:, None, :] + c[:, :, None] * c[:, None, :]
    )
    rows = np.repeat(tris, 3, axis=1).ravel()
    cols = np.tile(tris, (1, 3)).ravel()
    mat = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(grid.num_nodes,) * 2)
    return SparseMatrix(mat.tocsr(), symmetric=True)


def assemble_advection(grid: GridSpec, velocity: Callable) -> SparseMatrix:
    """C[i, j] = integral of lambda_i * (velocity . grad lambda_j).

    ``velocity(x1, x2)`` maps point arrays to stacked components (2, ...).
    Centroid quadrature keeps the row-sum identity C @ 1 = 0 exact.
    """
    tris = triangles(grid)
    area, b, c, centroid = _element_geometry(grid, tris)
    eps = np.asarray(velocity(centroid[:, 0], centroid[:, 1]), dtype=np.float64)
    conv = eps[0][:, None] * b + eps[1][:, None] * c  # (T, 3): velocity . grad
    local = (area / 3.0)[:, None, None] * conv[:, None, :]
    local = np.broadcast_to(local, (tris.shape[0], 3, 3))
    rows = np.repeat(tris, 3, axis=1).ravel()
    cols = np.tile(tris, (1, 3)).ravel()
    mat = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(grid.num_nodes,) * 2)
    return SparseMatrix(mat.tocsr(), symmetric=False)


def assemble_streamline_diffusion(grid: GridSpec, velocity: Callable,
                                  kappa: float) -> SparseMatrix:
    """Streamline-diffusion stabilization for advection-dominated transport.

    Adds tau_T * (velocity . grad lambda_i, velocity . grad lambda_j) per
    element with the classical tau = h/(2|velocity|) * (coth(Pe) - 1/Pe);
    symmetric positive semidefinite and it annihilates constants, so mass
    conservation is untouched.  Without it the centered advection operator
    is unstable at the cell Peclet numbers this problem runs at.
    """
    tris = triangles(grid)
    area, b, c, centroid = _element_geometry(grid, tris)
    eps = np.asarray(velocity(centroid[:, 0], centroid[:, 1]), dtype=np.float64)
    speed = np.sqrt(eps[0] ** 2 + eps[1] ** 2)
    h = np.sqrt(2.0 * area)
    peclet = np.maximum(speed * h / (2.0 * kappa), 1e-300)
    xi = 1.0 / np.tanh(np.minimum(peclet, 50.0)) - 1.0 / peclet  # -> pe/3 near 0
    tau = np.where(speed > 1e-12, h / (2.0 * np.maximum(speed, 1e-12)) * xi, 0.0)
    conv = eps[0][:, None] * b + eps[1][:, None] * c
    local = (tau * area)[:, None, None] * conv[:, :, None] * conv[:, None, :]
    rows = np.repeat(tris, 3, axis=1).ravel()
    cols = np.tile(tris, (1, 3)).ravel()
    mat = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(grid.num_nodes,) * 2)
    return SparseMatrix(mat.tocsr(), symmetric=True)


def lumped_mass(mass: SparseMatrix) -> np.ndarray:
    """Row sums of the consistent mass matrix; total equals the domain area."""
    return np.asarray(mass.mat.sum(axis=1)).ravel()


def _linexp_antiderivative(x, c0, c1, x0, g):
    return np.exp(g * (x - x0)) * ((c0 + c1 * x) / g - c1 / g**2)


def tent_exp_integrals(n: int, x0: float, width: float):
    """Exact 1D load integrals of hat functions against exp(-|x - x0| / width).

    Returns (values, d/dx0 values) for the n equispaced hats on [0, 1].
    Piecewise-exact integration keeps the total load equal to the true
    integral of the profile no matter how the peak aligns with the grid
    (nodal quadrature gets this wrong by orders of magnitude once the
    profile is narrower than a cell).  The x0-derivative of each exponential
    piece is -g times the piece, so the sink's position derivative comes in
    closed form as well.
    """
    dx = 1.0 / (n - 1)
    centers = np.arange(n) * dx
    values = np.zeros(n)
    derivs = np.zeros(n)
    for i, c in enumerate(centers):
        # tent rises on [c-dx, c] and falls on [c, c+dx], clipped to [0, 1]
        pieces = (
            (max(c - dx, 0.0), c, (dx - c) / dx, 1.0 / dx),
            (c, min(c + dx, 1.0), (c + dx) / dx, -1.0 / dx),
        )
        for lo, hi, c0, c1 in pieces:
            if hi <= lo:
                continue
            # split at the profile kink; choose the decaying exponential side
            for a, b in ((lo, min(hi, x0)), (max(lo, x0), hi)):
                if b <= a:
                    continue
                g = 1.0 / width if b <= x0 else -1.0 / width
                piece = _linexp_antiderivative(b, c0, c1, x0, g) - \
                    _linexp_antiderivative(a, c0, c1, x0, g)
                values[i] += piece
                derivs[i] += -g * piece
    return values, derivs


def source_load(n: int, y_x1: float, y_x2: float, c: float, sigma_s: float):
    """Exactly integrated load vector of the source profile (x-major order)."""
    fx, _ = tent_exp_integrals(n, y_x1, sigma_s)
    fy, _ = tent_exp_integrals(n, y_x2, sigma_s)
    return (c / sigma_s) * np.outer(fx, fy).ravel()


def sink_load_factors(n: int, alpha: float):
    """(x2-factor, its alpha-derivative) of the separable sink load."""
    fy, dfy = tent_exp_integrals(n, alpha, SINK_WIDTH_X2)
    return fy, dfy


def sink_load_x1_factor(n: int) -> np.ndarray:
    fx, _ = tent_exp_integrals(n, SINK_X1, SINK_WIDTH_X1)
    return SINK_SCALE * fx


# ---------------------------------------------------------------------------
# problem-specific fields


def horizontal_velocity(x1, x2):
    """Constant rightward transport field."""
    x1 = np.asarray(x1, dtype=np.float64)
    return np.stack([np.full_like(x1, 25.0), np.zeros_like(x1)])


def sinusoidal_velocity(y_v: float):
    """Weaving transport field whose vertical phase is set by ``y_v``."""

    def velocity(x1, x2):
        x1 = np.asarray(x1, dtype=np.float64)
        wave = 0.75 * np.cos(1.1 - x1) * np.sin(4.0 * np.pi * (x1 - y_v))
        under_root = 0.9**2 - wave**2
        assert np.all(under_root >= 0.0), "speed bound 0.9 violated"
        horiz = (1.0 + x1) * np.sqrt(under_root)
        vert = -0.9 * np.cos(1.1 - x1) * np.sin(4.0 * np.pi * (x1 - y_v))
        return np.stack([horiz, np.broadcast_to(vert, horiz.shape)])

    return velocity


def source_profile(x1, x2, y_x1: float, y_x2: float, c: float, sigma_s: float):
    """Contaminant inflow rate, an L1-exponential bump at the source point."""
    return (c / sigma_s) * np.exp(-(np.abs(x1 - y_x1) + np.abs(x2 - y_x2)) / sigma_s)


SINK_X1 = 0.6
SINK_WIDTH_X1 = 0.025
SINK_WIDTH_X2 = 0.15
SINK_SCALE = 25.0


def sink_profile(x1, x2, alpha: float):
    """Removal-rate profile: a ridge at x1 = 0.6 centered vertically at alpha.

    The exponent is negative so the profile decays away from the sink; the
    control scales it, with negative magnitudes removing concentration.
    """
    return SINK_SCALE * np.exp(
        -(np.abs(x1 - SINK_X1) / SINK_WIDTH_X1 + np.abs(x2 - alpha) / SINK_WIDTH_X2)
    )


def sink_profile_dalpha(x1, x2, alpha: float):
    """d/d(alpha) of ``sink_profile`` (defined a.e.; sign(0) = 0 at the ridge)."""
    return sink_profile(x1, x2, alpha) * np.sign(x2 - alpha) / SINK_WIDTH_X2
