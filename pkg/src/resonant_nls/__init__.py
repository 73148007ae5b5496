"""Two-wave solutions of periodic nonlinear polyharmonic eigenproblems at
resonant quasimomenta."""
from .experiments import (ContextTemplate, IsoCurve, SweepSpec, SweepTable, run_sweep,
                          trace_isoenergetic)
from .fourier import FourierSeries, multiply, star_norm
from .geometry import SetParams, chi0_test, chi_q_test, sample_resonant_layer, von_laue_defect
from .nonlinear import (Amplitude, ProblemContext, Solution, assemble_solution,
                        iterate_fixed_point, solve, validate_regime)
from .operators import LatticeWindow, build_model, model_block
from .perturbation import direct_oracle, nonresonant_series, resonant_series

__version__ = "0.1.0"

__all__ = [
    "Amplitude", "ContextTemplate", "FourierSeries", "IsoCurve", "LatticeWindow",
    "ProblemContext", "SetParams", "Solution", "SweepSpec", "SweepTable", "assemble_solution",
    "build_model", "chi0_test", "chi_q_test", "direct_oracle", "iterate_fixed_point",
    "model_block", "multiply", "nonresonant_series", "resonant_series", "run_sweep",
    "sample_resonant_layer", "solve", "star_norm", "trace_isoenergetic", "validate_regime",
    "von_laue_defect",
]
