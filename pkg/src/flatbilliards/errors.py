"""Exception types raised by the engine.

Kernel-level code reports failures through integer status codes (see
``_kernels.STATUS_*``); the Python wrappers translate them into these
exceptions so callers get a meaningful type instead of a sentinel.
"""


class FlatBilliardsError(Exception):
    """Base class for all engine errors."""


class ConfigError(FlatBilliardsError):
    """Invalid or unknown configuration input."""


class DegenerateStart(FlatBilliardsError):
    """Flight started on the boundary pointing out of the domain."""


class HorizonOverflow(FlatBilliardsError):
    """Free flight exceeded the configured cell cap (channel-aligned ray)."""


class TangentialDerivative(FlatBilliardsError):
    """One-step derivative requested at a grazing collision (cos phi ~ 0)."""


class FocusingBlowup(FlatBilliardsError):
    """Wavefront curvature passed through a focusing singularity."""


class NonReturn(FlatBilliardsError):
    """Induced-map iteration hit the step cap before returning to the base set."""


class BisectionFailure(FlatBilliardsError):
    """A bracketing search failed to isolate the requested transition."""


class ShootingDivergence(FlatBilliardsError):
    """Periodic-orbit shooting failed to converge."""


class InsufficientCounts(FlatBilliardsError):
    """An estimator bin fell below the minimum occupancy for a stable fit."""


class InsufficientOrbits(FlatBilliardsError):
    """Too few usable trapped orbits were produced for a cross-check."""


class FixedPointDivergence(FlatBilliardsError):
    """Implicit update of the discrete channel recursion failed to converge."""


class StepUnderflow(FlatBilliardsError):
    """Adaptive integrator stepped below the minimum step size."""


class CurveDegenerate(FlatBilliardsError):
    """Seed curve for expansion sampling collapsed or left the phase space."""
