"""Two-stage scheduling of rigid-profile load shifts on constrained LTI systems."""

from .lti_core import (
    ConfigurationError,
    LoadProfile,
    LtiSystem,
    Schedule,
    ScheduleResponse,
    TrajectoryCache,
    UserRequest,
    expm,
    make_system,
    response_component,
    state_at,
    step_response_block,
)
from .channel_model import (
    ModelError,
    OfftakeParams,
    PoolParams,
    build_channel,
    equilibrium_state,
)
from .constraint_eval import (
    ViolationReport,
    is_sip_feasible,
    solve_llp,
    update_constraint_sets,
    verify_schedule,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "LoadProfile",
    "LtiSystem",
    "ModelError",
    "OfftakeParams",
    "PoolParams",
    "Schedule",
    "ScheduleResponse",
    "TrajectoryCache",
    "UserRequest",
    "ViolationReport",
    "build_channel",
    "equilibrium_state",
    "expm",
    "is_sip_feasible",
    "make_system",
    "response_component",
    "solve_llp",
    "state_at",
    "step_response_block",
    "update_constraint_sets",
    "verify_schedule",
    "__version__",
]
