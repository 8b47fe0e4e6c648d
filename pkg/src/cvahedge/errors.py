"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid model, simulation, estimator or scenario configuration."""


class DomainError(ValueError):
    """An input lies outside the domain of an operation."""


class SimulationError(RuntimeError):
    """Path simulation could not be completed.

    Attributes:
        diagnostics: Free-form details (step, time, offending paths).
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class EstimatorError(RuntimeError):
    """A Monte Carlo estimate produced non-finite values or exceeded a guard."""


class DegenerateHedgeError(ArithmeticError):
    """The hedge denominator fell below the division guard.

    Attributes:
        u_terms: The numerator terms (U1, U2, U3) at the offending point.
        phi: The denominator value.
    """

    def __init__(self, message, u_terms, phi):
        super().__init__(message)
        self.u_terms = tuple(u_terms)
        self.phi = phi
