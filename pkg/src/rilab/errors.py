"""Exception types shared across the package."""


class RilabError(Exception):
    """Base class for errors raised by rilab."""


class ScalesDegenerateError(RilabError):
    """N is too small to support the two-scale geometry (k < 1)."""


class SingularSystemError(RilabError):
    """The Gram-matrix solve for an equilibrium measure failed."""


class SupportViolationError(RilabError):
    """An equilibrium solve produced negative mass beyond tolerance."""


class HaloTooSmallError(RilabError):
    """Monte Carlo capacity halo cannot meet the requested precision."""


class BiasBudgetError(RilabError):
    """Trajectory-truncation bias bound exceeds the configured budget."""


class GeometryError(RilabError):
    """Incompatible box geometry (e.g. inner set not inside outer set)."""


class InsufficientExcursionsError(RilabError):
    """An excursion record cannot supply the requested index prefix."""


class ProjectionTooThinError(RilabError):
    """No coordinate projection of the box set is large enough."""


class BaseBoxFailsError(RilabError):
    """The bottom box of a tower already fails the half-volume test."""


class InfeasibleError(RilabError):
    """The constrained minimization has an empty feasible set."""


class NoConvergenceError(RilabError):
    """The optimizer hit its iteration cap before converging."""


class ConfigError(RilabError):
    """Invalid experiment configuration."""
