"""u1flow: flow-assisted sampling of 2D U(1) lattice gauge theory."""
__version__ = "0.1.0"

from .lattice import (  # noqa: E402
    Coupling,
    LatticeGeometry,
    average_plaquette,
    exact_average_plaquette,
    topological_charge,
    wilson_action,
)
from .flow import Architecture, FlowModel, flow_forward, flow_inverse  # noqa: E402
from .hmc import HmcParams, run_chain  # noqa: E402
from .fthmc import EffectiveActionContext, run_fthmc_chain  # noqa: E402
from .training import TrainConfig, train, transfer_weights  # noqa: E402
from .estimator import TrivializingFlow  # noqa: E402

__all__ = [
    "Architecture", "Coupling", "EffectiveActionContext", "FlowModel", "HmcParams", "LatticeGeometry",
    "TrainConfig", "TrivializingFlow", "average_plaquette", "exact_average_plaquette", "flow_forward",
    "flow_inverse", "run_chain", "run_fthmc_chain", "topological_charge", "train", "transfer_weights",
    "wilson_action",
]
