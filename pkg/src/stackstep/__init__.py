"""Two-time-scale projected SGD for body/head networks, with reduced-objective diagnostics and neural TDC."""
from .numcore import make_rng, solve_spd, fd_grad, fd_hessian_2d
from .problems import (
    LayeredParams,
    ProblemConstants,
    RegressionObjective,
    ClassificationObjective,
    ToyObjective,
    get_activation,
    estimate_constants,
)
from .stackelberg import best_response, phi, phi_subgrad, phi_woodbury, moreau_prox, stationarity
from .optimizer import StepSchedule, TrainTrace, run, validate_schedule, tune_thm2
from .landscape import SliceSpec, sweep, trajectory_study
from .tdc import TabularMDP, ValueFeatures, mspbe, run_tdc

__version__ = "0.1.0"
