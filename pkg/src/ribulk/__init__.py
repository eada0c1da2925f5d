"""Random interlacements on Z^d: potential theory, occupation-field samplers,
local functionals and constrained Dirichlet-energy solvers."""

__version__ = "0.1.0"
