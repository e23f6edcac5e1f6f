"""Identification-robust inference in one- and two-factor models."""

from .errors import *  # noqa: F401,F403
from .gmm import FitResult, ParamSpace, minimize_full, minimize_null, q_n
from .harness import DgpSpec, McReport, ingest, report, run_mc, simulate
from .hypotheses import ConfidenceInterval, HypothesisSpec, ci_invert, registry, test_hypothesis
from .model_core import (
    OneFactorParams,
    OneFactorTheta,
    TwoFactorParams,
    TwoFactorTheta,
    id_strength_1f,
    id_strength_2f,
    invert_1f,
    invert_2f,
    omega_of_gamma,
    reparam_1f,
    reparam_2f,
)
from .moments import MomentSystem, model_for, vech, vhat
from .robust import TestOutcome, ar_full, clr_full, j_test, subvector_test
from .selection import SelectionReport, select_factors

__version__ = "0.1.0"
