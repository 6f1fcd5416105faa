"""Load balancing in heterogeneous server systems: join-the-fastest-shortest-queue
routing, simulation, exact small-N analysis and scaling sweeps."""

from .errors import (ConfigError, EstimationError, FitError, InvariantViolation, JfsqError,
                     NumericalError, ScaleError, StateError)
from .model import (Regime, ServiceProfile, SystemConfig, capacity_index, capacity_indices,
                    check_assumptions, classify, constants, make_profile)
from .policy import PolicyKind, PolicySpec, route, route_distribution

__version__ = "0.1.0"
