"""Safe model-based learning on an inverted pendulum.

Pipeline pieces: a small reverse-mode autodiff engine, an uncertainty-aware
recurrent forward model, a jointly trained neural Lyapunov function and
saturated policy, Monte Carlo safety verification, and a one-step safe MPC
explorer. The cli module chains them stage by stage.
"""

__version__ = "0.1.0"

from .tensor import Tensor  # noqa: F401
