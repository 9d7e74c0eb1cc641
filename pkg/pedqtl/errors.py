"""
Error types raised across pedqtl.
Each error carries the process exit code the command line maps it to.
"""

from typing import Iterable, List, Optional


class PedQtlError(Exception):
    """Base class for every error pedqtl raises on purpose"""
    exit_code = 1


class ConfigError(PedQtlError):
    """Control file or command line problem"""
    exit_code = 2


class DataError(PedQtlError):
    """Input data that cannot be analyzed"""
    exit_code = 3


class StructuralError(DataError):
    """Pedigree structure is inconsistent (missing parent, cycle, sex)"""


class FormatError(DataError):
    """Binary or text file does not follow its declared format"""


class LengthError(FormatError):
    """Genotype payload shorter or longer than the bim/fam sizes imply"""


class SchemaError(DataError):
    """Requested column absent, or file empty"""


class ParseError(DataError):
    """Cell that cannot be parsed as a number"""

    def __init__(self, message: str, row: Optional[int] = None, column: Optional[str] = None):
        super().__init__(message)
        self.row = row
        self.column = column


class JoinError(DataError):
    """Identifiers that do not match across input files"""

    def __init__(self, message: str, unmatched: Iterable[str] = ()):
        self.unmatched: List[str] = list(unmatched)
        preview = ", ".join(self.unmatched[:10])
        if len(self.unmatched) > 10:
            preview += f", ... ({len(self.unmatched)} total)"
        super().__init__(f"{message}: {preview}" if preview else message)


class DegenerateInputError(DataError):
    """Estimator undefined on this input (e.g. every SNP monomorphic)"""


class EmptyDataError(DataError):
    """Nothing left to analyze"""


class UnsupportedStructureError(DataError):
    """Structure outside what the estimator supports (inbred pedigree for delta7)"""


class NumericError(PedQtlError):
    """Linear algebra failure such as a non positive definite block"""
    exit_code = 4


class ModelError(PedQtlError):
    """Mean model cannot be estimated (rank deficient design)"""
    exit_code = 4
