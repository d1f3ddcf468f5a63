"""Exception hierarchy for the CE-SIS estimator"""


class CeSisError(Exception):
    """Base error for the package"""


class InputError(CeSisError, ValueError):
    """Non-finite or out-of-domain input"""


class DensityError(CeSisError):
    """Invalid mixture parameters or a covariance that is not positive definite"""


class FitError(CeSisError):
    """Weighted EM contract violated (e.g. no effective samples)"""


class DegenerateComponentError(FitError):
    """A mixture component collapsed during an EM update"""


class SelectionError(CeSisError):
    """No feasible mixture order in the candidate grid"""


class ConfigError(CeSisError, ValueError):
    """Invalid configuration or budget"""


class OracleError(CeSisError):
    """Quadrature or calibration failure on a closed-form model"""


class SimulationError(CeSisError):
    """The simulation model raised while producing outputs"""
