"""Feature-inference attacks against Shapley-value model explanations.

Black-box target models, exact and permutation-sampled Shapley explainers, a
local pay-per-query explanation service, the two reconstruction attacks
(auxiliary-data inverse mapping and random-query interpolation), explanation
defenses, and an experiment harness.
"""

__version__ = "0.1.0"

from shapleak.data import Dataset, SynthConfig, gen_synthetic, load_csv, split
from shapleak.explain import Explanation, ShapleyExplainer, exact_shapley, sampled_shapley
from shapleak.models import (
    GBDTClassifier,
    KernelSVMClassifier,
    MLPClassifier,
    RandomForestClassifier,
    load_model,
    save_model,
)
from shapleak.attack1 import InverseMappingAttack
from shapleak.attack2 import InterpolationAttack, error_bound

__all__ = [
    "Dataset",
    "SynthConfig",
    "gen_synthetic",
    "load_csv",
    "split",
    "Explanation",
    "ShapleyExplainer",
    "exact_shapley",
    "sampled_shapley",
    "MLPClassifier",
    "RandomForestClassifier",
    "GBDTClassifier",
    "KernelSVMClassifier",
    "load_model",
    "save_model",
    "InverseMappingAttack",
    "InterpolationAttack",
    "error_bound",
]
