"""Power-grid state estimation and one-step state forecasting."""
from gridse.kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
