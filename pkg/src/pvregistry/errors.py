"""Exception hierarchy shared by every pvregistry module."""


class PVRegistryError(Exception):
    """Base class; carries the CLI exit code for the failure category."""

    exit_code = 3


class InputError(PVRegistryError):
    exit_code = 2


class DegenerateGeometry(InputError):
    pass


class GeometryError(InputError):
    def __init__(self, message, feature_index=None):
        super().__init__(message)
        self.feature_index = feature_index


class ParseError(InputError):
    def __init__(self, message, byte_offset=None):
        super().__init__(message)
        self.byte_offset = byte_offset


class MissingProperty(InputError):
    pass


class EmptyFile(InputError):
    pass


class EmptyIndex(InputError):
    pass


class InsufficientData(InputError):
    pass


class BoundsError(InputError):
    pass


class EmptyLut(InputError):
    pass


class DegenerateFit(InputError):
    pass


class NoMatches(InputError):
    pass


class UndefinedReference(PVRegistryError):
    """Raised for a registry city with k = 0 or C = 0; callers exclude the city."""

    exit_code = 2


class EmptyComparisonSet(InputError):
    pass


class InvalidConfig(InputError):
    pass
