"""Safety-critical control with belief barrier functions under state-dependent
measurement noise.

Subpackages cover special functions, system/noise models, EKF and GEKF
estimators, CVaR belief barriers, a small dense QP solver, the two benchmark
controllers, and a closed-loop simulation / Monte Carlo engine.
"""

from bcbf_gekf.estimators import Belief, MeasurementUpdateReport, ekf_update, gekf_update, time_update
from bcbf_gekf.belief_safety import HalfSpaceConstraint, cvar_halfspace, halfspace_probability

__all__ = [
    "Belief",
    "MeasurementUpdateReport",
    "HalfSpaceConstraint",
    "ekf_update",
    "gekf_update",
    "time_update",
    "cvar_halfspace",
    "halfspace_probability",
]

__version__ = "0.1.0"
