"""Exception types shared across the toolkit.

Every failure mode that callers are expected to branch on gets its own
class; generic misuse raises the usual ValueError/TypeError instead.
"""


class MorseflowError(Exception):
    """Base class for all toolkit-specific errors."""


# -- kernel certification ------------------------------------------------

class NotPositiveDefinite(MorseflowError):
    """A(s) has a non-positive eigenvalue at the reported s."""

    def __init__(self, s, lam=None):
        self.s = s
        self.lam = lam
        msg = f"weight kernel not positive definite at s={s:.6g}"
        if lam is not None:
            msg += f" (eigenvalue {lam:.3e})"
        super().__init__(msg)


class NoDecay(MorseflowError):
    """The decay-rate estimate C_A came out non-positive."""


class CouplingTooLarge(MorseflowError):
    """No finite coupling bound exists on the sampled range."""


class AsymmetricCoupling(MorseflowError):
    """The integral of the coupling kernel is not symmetric."""


class GridMismatch(MorseflowError):
    """History grid is incompatible with the kernel horizon or step."""


# -- integration ---------------------------------------------------------

class Blowup(MorseflowError):
    """Trajectory escaped the bound implied by the Lyapunov function."""

    def __init__(self, t, norm, bound):
        self.t = t
        self.norm = norm
        self.bound = bound
        super().__init__(
            f"|x| = {norm:.3e} exceeded 10x the derived bound {bound:.3e} at t={t:.4g}"
        )


class StepTooLarge(MorseflowError):
    """Energy-identity spot check failed grossly; reduce dt."""


# -- equilibria ----------------------------------------------------------

class NonHyperbolic(MorseflowError):
    """An eigenvalue real part fell inside the hyperbolicity margin."""

    def __init__(self, point, margin):
        self.point = point
        self.margin = margin
        super().__init__(f"eigenvalue within {margin:.1e} of the imaginary axis at {point}")


class LeftBlock(MorseflowError):
    """A continued branch left the isolating neighborhood of its start."""


class DimChange(MorseflowError):
    """Stability classification changed along a continuation branch."""


# -- blocks --------------------------------------------------------------

class IllConditioned(MorseflowError):
    """Coordinate frame condition number exceeds the allowed limit."""


class EpsTooLarge(MorseflowError):
    """eps is outside the admissible range for the requested formula."""


class NoCoercivity(MorseflowError):
    """The symmetrized form has no positive coercivity constant."""


# -- manifolds -----------------------------------------------------------

class BoundsViolated(MorseflowError):
    """One or more transform-constant bounds failed."""

    def __init__(self, failed):
        self.failed = dict(failed)
        parts = ", ".join(f"{k}={v:.4g}" for k, v in self.failed.items())
        super().__init__(f"transform constant bounds violated: {parts}")


class NewtonStall(MorseflowError):
    """An implicit node solve did not converge after all fallbacks."""

    def __init__(self, node, residual):
        self.node = node
        self.residual = residual
        super().__init__(f"implicit solve stalled at node {node} (residual {residual:.3e})")


class NotContracting(MorseflowError):
    """Measured graph-transform iterate ratio reached 1."""


class FiberNotContracting(MorseflowError):
    """Measured slope-transform iterate ratio reached 1."""


# -- connections ---------------------------------------------------------

class InsufficientSamples(MorseflowError):
    """Too few disk samples near the requested reparameterization point."""


class LipschitzUnreachable(MorseflowError):
    """Shrinking the base box never met the Lipschitz target."""


class NotTransversal(MorseflowError):
    """Tangent spaces fail the transversality dimension count."""


class NoEntry(MorseflowError):
    """No shot trajectory entered the target block's basin."""


class ContractionFailed(MorseflowError):
    """The composed intersection map's measured factor reached 1."""


class EtaBallViolated(MorseflowError):
    """Transported memory norm exceeded the target block's radius."""


class AmbiguousMatching(MorseflowError):
    """Two nodes of one graph matched the same node of the other."""


# -- cli -----------------------------------------------------------------

class ConfigError(MorseflowError):
    """Configuration file or flag problem, with location diagnostics."""

    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        loc = []
        if field is not None:
            loc.append(f"field {field!r}")
        if line is not None:
            loc.append(f"line {line}")
        suffix = f" ({', '.join(loc)})" if loc else ""
        super().__init__(message + suffix)
