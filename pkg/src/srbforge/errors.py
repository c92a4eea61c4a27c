"""Exception types shared across the toolkit."""


class SrbForgeError(Exception):
    pass


class ConfigError(SrbForgeError):
    """A parameter violates one of the standing constraint chains."""


class OrbitHitsCriticalError(SrbForgeError):
    """An orbit point landed on (or within tolerance of) the critical set."""


class SingularOrbitError(SrbForgeError):
    """An operation needed orbit entries that are flagged as singular."""


class BranchAmbiguityError(SrbForgeError):
    """Backward interval tracking met a monotonicity break mid-interval."""


class NotHyperbolicTimeError(SrbForgeError):
    """A pre-ball was requested at a time that is not hyperbolic."""


class OverlapError(SrbForgeError):
    """Two constructed partition elements intersect; this is always a bug."""


class MarkovViolationError(SrbForgeError):
    """A branch of the induced map fails to cover its target element."""


class EmptyStructureError(SrbForgeError):
    """No partition elements are available to assemble an induced map."""


class GridMismatchError(SrbForgeError):
    """Two density estimates live on different grids."""


class OrbitEscapesStructureError(SrbForgeError):
    """An induced orbit left the constructed domain."""
