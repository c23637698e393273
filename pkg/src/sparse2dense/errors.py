"""Exception types shared across readers and the CLI."""


class FormatError(ValueError):
    """Malformed or truncated input file."""
