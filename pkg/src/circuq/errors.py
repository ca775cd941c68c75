"""Exception types shared across the library."""


class CircuitError(Exception):
    """Base class for all circuit-related failures."""


class ShapeError(CircuitError, ValueError):
    """Evidence or data dimensions do not match the circuit."""


class ParameterError(CircuitError, ValueError):
    """A node carries a non-finite or otherwise unusable parameter."""


class StructureError(CircuitError, ValueError):
    """An operation was requested on a circuit whose structure does not support it."""


class SerializationError(CircuitError, ValueError):
    """A circuit file is malformed, has an unknown version, or fails validation on load."""


class ManualSpecError(CircuitError, ValueError):
    """A hand-written circuit description failed to parse or is cyclic."""


class UnderflowError(CircuitError, ArithmeticError):
    """All class likelihoods vanished; the posterior is undefined."""


class DegenerateSampleError(CircuitError, ArithmeticError):
    """Every stochastic forward pass underflowed to zero likelihood for every class."""
