from __future__ import annotations


class ResponseTrajectoryError(Exception):
    """Base class for all errors raised by the package.

    The ``exit_code`` is the process exit status the command line interface uses when the
    error reaches it.
    """

    exit_code: int = 1


class InputFileNotFound(ResponseTrajectoryError):
    """Exception raised when an input file is not found."""

    exit_code = 3

    def __init__(self, file: str, **kwargs) -> None:
        """
        Initialize the exception.

        :param file: The path of the file.
        :param kwargs: Additional keyword arguments.
        """
        message = f"File not found: {file}"
        super().__init__(message, **kwargs)


class MalformedInput(ResponseTrajectoryError):
    """Exception raised when an input table violates its schema or invariants."""

    exit_code = 3

    def __init__(self, file: str, reason: str, row: int | None = None, **kwargs) -> None:
        """
        Initialize the exception.

        :param file: The path of the offending file.
        :param reason: What is wrong with the input.
        :param row: The 1-based line number in the file, header included. Defaults to None.
        :param kwargs: Additional keyword arguments.
        """
        location = f"{file}:{row}" if row is not None else file
        self.row = row
        super().__init__(f"{location}: {reason}", **kwargs)


class UnknownPatient(ResponseTrajectoryError):
    """Exception raised when a meal refers to a patient without glucose records."""

    exit_code = 3

    def __init__(self, patient_id: str, file: str, row: int, **kwargs) -> None:
        """
        Initialize the exception.

        :param patient_id: The unknown patient identifier.
        :param file: The meals file.
        :param row: The 1-based line number in the file.
        :param kwargs: Additional keyword arguments.
        """
        self.row = row
        message = f"{file}:{row}: patient <{patient_id}> has no glucose records."
        super().__init__(message, **kwargs)


class MissingFit(ResponseTrajectoryError):
    """Exception raised when fit artifacts are requested from a directory without them."""

    exit_code = 3

    def __init__(self, directory: str, missing: str = "draws.csv", **kwargs) -> None:
        """
        Initialize the exception.

        :param directory: The fit directory.
        :param missing: The artifact that could not be found.
        :param kwargs: Additional keyword arguments.
        """
        message = f"No fit found in {directory} (missing {missing})."
        super().__init__(message, **kwargs)


class DatasetMismatch(ResponseTrajectoryError):
    """Exception raised when artifacts were produced from different datasets."""

    exit_code = 3

    def __init__(self, first: str, second: str, **kwargs) -> None:
        """
        Initialize the exception.

        :param first: Description of the first dataset.
        :param second: Description of the second dataset.
        :param kwargs: Additional keyword arguments.
        """
        message = f"Datasets do not match: {first} != {second}"
        super().__init__(message, **kwargs)


class DomainError(ResponseTrajectoryError, ValueError):
    """Exception raised when an argument lies outside the domain of a function."""

    exit_code = 3

    def __init__(self, name: str, value: object, requirement: str, **kwargs) -> None:
        """
        Initialize the exception.

        :param name: The name of the argument.
        :param value: The offending value.
        :param requirement: The condition the argument must satisfy.
        :param kwargs: Additional keyword arguments.
        """
        message = f"Argument <{name}> = {value!r} must satisfy {requirement}."
        super().__init__(message, **kwargs)


class StructuralError(ResponseTrajectoryError, ValueError):
    """Exception raised when a parameter layout does not match the data or model."""

    exit_code = 3

    def __init__(self, reason: str, **kwargs) -> None:
        """
        Initialize the exception.

        :param reason: Description of the mismatch.
        :param kwargs: Additional keyword arguments.
        """
        super().__init__(f"Structural mismatch: {reason}", **kwargs)


class CholeskyFailure(ResponseTrajectoryError):
    """Exception raised when a covariance stays indefinite after jitter escalation."""

    exit_code = 4

    def __init__(self, size: int, jitter: float, **kwargs) -> None:
        """
        Initialize the exception.

        :param size: The dimension of the matrix.
        :param jitter: The largest jitter that was tried.
        :param kwargs: Additional keyword arguments.
        """
        message = f"Cholesky factorization of a {size}x{size} matrix failed with jitter {jitter:g}"
        super().__init__(message, **kwargs)


class SamplerFailure(ResponseTrajectoryError):
    """Exception raised when the sampler cannot produce usable draws."""

    exit_code = 4

    def __init__(self, reason: str, report: dict | None = None, **kwargs) -> None:
        """
        Initialize the exception.

        :param reason: Why sampling failed.
        :param report: Diagnostic information collected before the failure. Defaults to None.
        :param kwargs: Additional keyword arguments.
        """
        self.report = report or {}
        details = ", ".join(f"{key}={value}" for key, value in self.report.items())
        message = f"Sampling failed: {reason}" + (f" ({details})" if details else "")
        super().__init__(message, **kwargs)
