"""Error types shared across the package.

Exit-code mapping used by the CLI: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class GlyphReidError(Exception):
    pass


class ConfigError(GlyphReidError, ValueError):
    """Invalid configuration value; message names the violated bound."""


class DataError(GlyphReidError, ValueError):
    """Corpus / vocabulary / file-format problem."""


class VocabularyError(DataError):
    """Unknown word or out-of-range token id."""


class ContractError(GlyphReidError, ValueError):
    """A documented call contract was violated (shapes, norms, empty sets)."""


class NumericError(GlyphReidError, ArithmeticError):
    """NaN/Inf or other numeric failure; message names the component."""
