"""Expert-choice routed diffusion transformer on a small NumPy autodiff engine."""

__version__ = "0.1.0"
