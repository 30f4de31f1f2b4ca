"""Error taxonomy shared by the whole package.

Every error raised by driftlearn is one of these, so the CLI can map
failures onto its three nonzero exit codes without inspecting messages.
"""

from __future__ import annotations


class DriftlearnError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigurationError(DriftlearnError):
    """Invalid configuration: bad field values, unknown keys, bad CLI args."""

    exit_code = 1


class ShapeError(ConfigurationError):
    """Array/layout mismatch between values that must agree elementwise."""


class DataError(DriftlearnError):
    """Bad or missing data: unreadable files, corrupt payloads, domain errors."""

    exit_code = 2


class StateError(DataError):
    """Operation applied to a store or state object that cannot accept it."""


class NumericalError(DriftlearnError):
    """Non-finite values where finite arithmetic is required."""

    exit_code = 3
