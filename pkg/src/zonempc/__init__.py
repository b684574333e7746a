"""Economic MPC with zone tracking for a rate-based CO2 absorption column."""

from .column import (
    ColumnConfig,
    ColumnState,
    GasInlet,
    LiquidInlet,
    ModelError,
    Scaler,
    StreamBoundary,
    efficiency,
    rhs,
)
from .model import AbsorberModel, SteadyStateError
from .numerics import (
    Ellipsoid,
    IntegrationError,
    LinearModel,
    NumericsError,
    SdpError,
    integrate,
    is_hurwitz,
    linearize,
    solve_invariance_sdp,
    solve_lyapunov,
)
from .properties import DefaultPropertyPackage, PropertyPackage, ZeroTransferPackage

__version__ = "0.1.0"
