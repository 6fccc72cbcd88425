"""Simulation and verification toolkit for bounded-data backward SDEs."""

__version__ = "0.1.0"

from .errors import (
    BlowUpError,
    BsdelabError,
    CapabilityError,
    CapacityError,
    DivergenceError,
    HorizonExceededError,
    InvalidConfigError,
    InvalidInputError,
    NoCertificateError,
)
from .model import (
    AuditReport,
    AuditRow,
    BSDEProblem,
    Dimensions,
    Driver,
    DriverMeta,
    MetaValidationReport,
    RateFunction,
    SampleSpec,
    TerminalCondition,
    frobenius_norm,
    gronwall_bound,
    stopping_function,
    stopping_function_derivative,
    truncate_matrix,
    truncated_driver,
    validate_driver_meta,
)

__all__ = [
    "BlowUpError",
    "BsdelabError",
    "CapabilityError",
    "CapacityError",
    "DivergenceError",
    "HorizonExceededError",
    "InvalidConfigError",
    "InvalidInputError",
    "NoCertificateError",
    "AuditReport",
    "AuditRow",
    "BSDEProblem",
    "Dimensions",
    "Driver",
    "DriverMeta",
    "MetaValidationReport",
    "RateFunction",
    "SampleSpec",
    "TerminalCondition",
    "frobenius_norm",
    "gronwall_bound",
    "stopping_function",
    "stopping_function_derivative",
    "truncate_matrix",
    "truncated_driver",
    "validate_driver_meta",
    "__version__",
]
