"""Exception hierarchy shared by all levicool modules."""


class LevicoolError(Exception):
    """Base class for all package errors."""


class ConfigError(LevicoolError):
    """Invalid or inconsistent configuration value."""


class IntegrationFault(LevicoolError):
    """Particle state became non-finite during integration."""


class ParticleLost(LevicoolError):
    """Image center moved more than 3 sigma outside the camera ROI."""

    def __init__(self, message, t=None):
        super().__init__(message)
        self.t = t


class LowSignalError(LevicoolError):
    """Frame carries no usable signal for the requested estimator."""


class FitFailedError(LevicoolError):
    """Nonlinear fit did not converge; carries the best iterate found."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class DegenerateFitError(LevicoolError):
    """Fitted PSF width collapsed below the physical floor."""


class InsufficientShiftError(LevicoolError):
    """Calibration displacement too small to resolve."""


class SequencingError(LevicoolError):
    """Controller received samples out of time order."""


class InsufficientDataError(LevicoolError):
    """Trace too short for the requested spectral estimate."""


class BandError(LevicoolError):
    """Requested integration band lies outside the PSD frequency range."""


class CalibrationError(LevicoolError):
    """Temperature calibration could not be established."""
