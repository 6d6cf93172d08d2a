"""Assimilation engines over a common forward-model interface."""
from .diagnostics import DaDiagnostics
from .esmda import EsmdaConfig, esmda_update, perturb_observations, run_esmda, run_sh_esmda
from .forward import (LOG_PERM_BOUNDS, ForwardModel, ForwardModelError, HighFidelityForward,
                      SurrogateForward)
from .rml import RmlConfig, rml_cost, run_rml, run_sh_rml

__all__ = [
    "DaDiagnostics", "EsmdaConfig", "esmda_update", "perturb_observations", "run_esmda",
    "run_sh_esmda", "LOG_PERM_BOUNDS", "ForwardModel", "ForwardModelError", "HighFidelityForward",
    "SurrogateForward", "RmlConfig", "rml_cost", "run_rml", "run_sh_rml",
]
