"""Simulation and frequency-domain analysis toolkit for a viscoelastic
liquid-cooled series-elastic actuator and its two-joint leg testbed."""

__version__ = "0.1.0"

from .lintf import (DelayedTransferFunction, FrequencyResponsePoint,
                    Polynomial, SecondOrderFit, StabilityReport,
                    fit_second_order, stability_margins, sweep_response)
from .vlca import (ActuatorParams, ControllerGains, ControllerKind,
                   DEFAULT_MOMENT_ARM, VLCA_ACTUATOR, calibrate_margins,
                   closed_loop_tf, force_plant, margin_table, open_loop_tf,
                   plant_px)

__all__ = [
    "__version__",
    "ActuatorParams", "ControllerGains", "ControllerKind",
    "DEFAULT_MOMENT_ARM", "VLCA_ACTUATOR",
    "DelayedTransferFunction", "FrequencyResponsePoint", "Polynomial",
    "SecondOrderFit", "StabilityReport",
    "calibrate_margins", "closed_loop_tf", "fit_second_order", "force_plant",
    "margin_table", "open_loop_tf", "plant_px", "stability_margins",
    "sweep_response",
]
