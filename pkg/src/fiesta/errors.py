"""Exception hierarchy shared by the toolkit.

Every error raised on a documented failure path derives from FiestaError so
the command-line layer can report a single-line message and a nonzero exit
status without special-casing modules.
"""


class FiestaError(Exception):
    """Base class for all toolkit errors."""


class FormatError(FiestaError):
    """A file does not conform to one of the binary or JSON layouts."""


class ConfigError(FiestaError):
    """Invalid configuration value or combination."""


class TrainingDivergedError(FiestaError):
    """Training produced a non-finite loss."""


class DegenerateInputError(FiestaError):
    """An input is structurally valid but degenerate for the operation."""


class GenerationError(FiestaError):
    """The generative sampler could not satisfy its target."""
