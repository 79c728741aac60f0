"""Generator identification of control-affine systems and policy iteration on the identified model."""

from .dynamics import ControlAffineSystem, benchmark, integrate, linear_system, rollout
from .identify import GeneratorModel, YosidaConfig, identify_resolvent
from .observables import Dictionary, MaxPerVariable, TotalDegree, enumerate_dictionary
from .pi import CostSpec, PiConfig, ValueNetwork, policy_iteration

__all__ = [
    "ControlAffineSystem",
    "CostSpec",
    "Dictionary",
    "GeneratorModel",
    "MaxPerVariable",
    "PiConfig",
    "TotalDegree",
    "ValueNetwork",
    "YosidaConfig",
    "benchmark",
    "enumerate_dictionary",
    "identify_resolvent",
    "integrate",
    "linear_system",
    "policy_iteration",
    "rollout",
]
__version__ = "0.1.0"
