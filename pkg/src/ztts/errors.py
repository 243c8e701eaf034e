"""Error classes shared across the package.

Plain argument misuse raises ValueError; file trouble raises OSError.
The classes here cover the remaining failure modes that callers may want
to catch separately.
"""


class FormatError(Exception):
    """A file exists but its encoding or layout is not supported."""


class VersionError(Exception):
    """A checkpoint, config, or cache has an incompatible schema tag."""


class AlignmentError(Exception):
    """No monotonic surjective alignment exists for the given lengths."""
