"""Amortized feedback policies for parameterized advection-diffusion control.

Three training paths share one FEM environment: a model-based trainer that
fits a value network by penalizing the dynamic-programming PDE along
feedback rollouts, data-driven PPO/TD3 actor-critic training, and a
per-instance adjoint-gradient L-BFGS reference solver.
"""

from pdepolicy.tape import FactorizedOperator, Node, SparseMatrix, Tape

__version__ = "0.1.0"

__all__ = ["Tape", "Node", "SparseMatrix", "FactorizedOperator", "__version__"]
