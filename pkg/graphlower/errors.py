# errors.py
"""Exception hierarchy shared by every stage of the compiler and runtime."""

from typing import List, Optional


class GraphLowerError(Exception):
    """Base class for all compiler and runtime failures."""


class TypeCheckError(GraphLowerError):
    pass


class VerificationError(GraphLowerError):
    def __init__(self, message: str, diagnostics: Optional[List] = None):
        super().__init__(message)
        self.diagnostics = list(diagnostics or [])


class CycleError(GraphLowerError):
    def __init__(self, message: str, node_id=None):
        super().__init__(message)
        self.node_id = node_id


class UnsupportedGradientError(GraphLowerError):
    pass


class LoweringError(GraphLowerError):
    pass


class PassError(GraphLowerError):
    def __init__(self, pass_name: str, message: str):
        super().__init__(f"{pass_name}: {message}")
        self.pass_name = pass_name


class ProfileError(GraphLowerError):
    pass


class IRError(GraphLowerError):
    pass


class BindingError(GraphLowerError):
    pass


class PartitionError(GraphLowerError):
    pass


class ProvisioningError(GraphLowerError):
    def __init__(self, device_id: str, message: str):
        super().__init__(f"device {device_id}: {message}")
        self.device_id = device_id


class ModelLoadError(GraphLowerError):
    def __init__(self, location: str, message: str):
        super().__init__(f"{location}: {message}")
        self.location = location


class UnknownNetworkError(GraphLowerError):
    pass
