"""Exception types raised by the laboratory, one per recoverable failure mode."""


class AmperelabError(Exception):
    """Base class for all package errors."""


# -- domains and fields -------------------------------------------------------

class NonConvexDomain(AmperelabError):
    pass


class NormalizationImpossible(AmperelabError):
    pass


class InsufficientStencil(AmperelabError):
    pass


class PositiveInteriorValue(AmperelabError):
    pass


# -- solver --------------------------------------------------------------------

class NonConvergence(AmperelabError):
    def __init__(self, iterations, residual):
        super().__init__(f"no convergence after {iterations} iterations, residual {residual:.3e}")
        self.iterations = iterations
        self.residual = residual


class DegenerateRhs(AmperelabError):
    pass


class ProfileBlowup(AmperelabError):
    pass


class PinchFailure(AmperelabError):
    pass


# -- sections ------------------------------------------------------------------

class EmptySection(AmperelabError):
    pass


class DegenerateSection(AmperelabError):
    pass


class ResamplingOutOfDomain(AmperelabError):
    pass


class NoPassingDelta(AmperelabError):
    pass


class CoverageGap(AmperelabError):
    """Greedy cover left target nodes uncovered.

    Carries the uncovered node indices and, when identified, the
    candidate/selected section pair on which the engulfing containment failed.
    """

    def __init__(self, uncovered, failing_pairs):
        super().__init__(f"{len(uncovered)} target nodes uncovered")
        self.uncovered = uncovered
        self.failing_pairs = failing_pairs


# -- level-set analysis ----------------------------------------------------------

class NoPassingConstant(AmperelabError):
    pass


class RescaleMismatch(AmperelabError):
    pass


class SectionSearchFailure(AmperelabError):
    pass


class InsufficientLevels(AmperelabError):
    pass


class LayerCakeMismatch(AmperelabError):
    pass


# -- degenerate measures ----------------------------------------------------------

class PropertyViolated(AmperelabError):
    pass


class ZeroMuMass(AmperelabError):
    pass


# -- experiment runner ------------------------------------------------------------

class ConfigError(AmperelabError):
    pass


class IncompatibleManifests(AmperelabError):
    pass
