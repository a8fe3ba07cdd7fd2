"""Exception types raised across the package."""


class NlosLocError(Exception):
    """Base class for all package-specific errors."""


class SingularGeometry(NlosLocError):
    """Scatterer plane (nearly) parallel to the arrival ray: |cos(theta - gamma)| below threshold."""


class NonPhysicalPath(NlosLocError):
    """Computed single-bounce path length is not positive."""


class InconsistentScenario(NlosLocError):
    """Ground-truth target violates a true wedge constraint (no single-bounce path exists)."""


class SingularQuadratic(NlosLocError):
    """Aggregate quadratic form for the position update is (near-)singular; geometry underdetermined."""


class DisconnectedTopology(NlosLocError):
    """Gossip topology is not connected."""


class Underdetermined(NlosLocError):
    """Too few nodes for 2-D identifiability."""


class FlatCorrelation(NlosLocError):
    """Cross-correlation has no reliable peak (peak-to-mean ratio too low)."""


class SlotCollision(NlosLocError):
    """Relay retransmission windows overlap."""


class ConfigError(NlosLocError):
    """Malformed configuration file or CLI arguments."""
