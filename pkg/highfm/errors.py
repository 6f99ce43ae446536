"""
Exception hierarchy for HighFM
Every error raised by the package derives from HighFMError
"""


class HighFMError(Exception):
    """Base class for all HighFM errors"""


class ConfigError(HighFMError):
    """Invalid or inconsistent configuration"""


class ShapeError(HighFMError):
    """Tensor extents do not fit the operation"""


class NumericalError(HighFMError):
    """Non-finite values produced from finite inputs (debug mode)"""


class GradientError(HighFMError):
    """Misuse of reverse-mode differentiation"""


class GradCheckError(HighFMError):
    """Finite-difference check could not be evaluated"""


class ContractError(HighFMError):
    """A documented precondition was violated"""


class UndefinedMetricError(HighFMError):
    """A metric's denominator is zero for the evaluated data"""


class SplitError(HighFMError):
    """A timestamp is not covered by the split rules, or rules overlap"""


class CollocationError(HighFMError):
    """Image/label sequences are not in timestamp order"""


class SampleUnavailableError(HighFMError):
    """No same-hour bucket holds enough acquisitions for a multi-timestep sample"""


class ContainerError(HighFMError):
    """Base class for HFMP1 container failures"""


class MagicMismatchError(ContainerError):
    pass


class VersionMismatchError(ContainerError):
    pass


class TruncatedContainerError(ContainerError):
    pass


class DigestMismatchError(ContainerError):
    pass


class CheckpointError(HighFMError):
    """Malformed or incompatible HFMCKPT1 checkpoint"""
