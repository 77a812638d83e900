"""Exception hierarchy shared by all modules."""


class FireRiskError(Exception):
    """Base class. ``exit_code`` is what the CLI returns for it."""

    exit_code = 1


class DataError(FireRiskError):
    """Malformed or inconsistent input data.

    ``row`` is 1-based and counts the header as row 1, so it matches what a
    text editor shows.
    """

    exit_code = 2

    def __init__(self, message, row=None, column=None):
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class ModelError(FireRiskError):
    """Training or prediction failure (degenerate data, dimension mismatch)."""


class ValidationError(FireRiskError):
    """Invalid split plan or empty fold."""

    exit_code = 2


class RasterError(FireRiskError):
    """Malformed grid file or misaligned raster stack."""

    exit_code = 2
