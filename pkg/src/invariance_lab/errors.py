"""Exception types shared across the lab."""


class LabError(Exception):
    """Base class for every error raised by this package."""


class InvalidInput(LabError, ValueError):
    pass


class TooLarge(LabError):
    """An exact enumeration would exceed the configured cap."""


class NoData(LabError, KeyError):
    """A conditioning key was never observed (distinct from zero probability)."""

    def __str__(self):
        return str(self.args[0]) if self.args else "no data"


class SingularDesign(LabError):
    pass


class Unbounded(LabError):
    """Concentrability ratio is infinite."""


class DivergentKL(LabError):
    pass
