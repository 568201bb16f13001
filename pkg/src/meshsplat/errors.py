"""Exception types shared across the package."""


class MeshSplatError(Exception):
    """Base class for all engine errors."""


class DegenerateFace(MeshSplatError):
    """A triangle is too small (or collapsed) to carry a local frame."""


class TopologyMismatch(MeshSplatError):
    """Two mesh-indexed structures disagree on vertex/face counts."""


class DimensionMismatch(MeshSplatError):
    """Two images (or arrays) that must share a shape do not."""


class SchemaError(MeshSplatError):
    """A manifest or config file violates its schema."""


class MissingAsset(MeshSplatError):
    """A file referenced by a manifest does not exist on disk."""


class EmptyMask(MeshSplatError):
    """A pixel mask selects no pixels."""


class NonFiniteLoss(MeshSplatError):
    """Training produced a NaN or infinite loss value."""
