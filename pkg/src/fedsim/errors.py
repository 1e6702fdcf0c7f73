"""Exception types shared across the package."""


class FedSimError(Exception):
    pass


class ConfigError(FedSimError, ValueError):
    """Invalid or inconsistent configuration."""


class PartitionError(FedSimError, ValueError):
    pass


class IngestionError(FedSimError, ValueError):
    """A CSV file could not be turned into a dataset."""

    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.row = row
        self.column = column


class TaskExistsError(FedSimError, FileExistsError):
    pass


class TaskLoadError(FedSimError, ValueError):
    pass


class TraceError(ConfigError):
    """Schema violation in a trace file; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class IllegalTransition(FedSimError, RuntimeError):
    pass


class DispatchError(FedSimError, LookupError):
    pass


class RecordError(FedSimError, ValueError):
    pass


class TuningError(FedSimError, RuntimeError):
    pass
