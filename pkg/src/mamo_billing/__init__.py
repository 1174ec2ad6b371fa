"""Trusted third-party billing with authorized, tamper-evident call records."""

from .authz import AuthorizationMode, combined_validate, validate_edit
from .envelope import apply_edit, open_segment, seal_segment
from .errors import MamoError

__all__ = [
    "AuthorizationMode",
    "MamoError",
    "apply_edit",
    "combined_validate",
    "open_segment",
    "seal_segment",
    "validate_edit",
]

__version__ = "0.1.0"
