# ----------------------------------------------------------
# Exit codes (0 is success, 1/2 are left to click itself)
# ----------------------------------------------------------
EXIT_CONFIG = 3
EXIT_IO = 4
EXIT_CONTRACT = 5


class VadError(Exception):
    """Base class for every error raised on purpose by this package."""

    exit_code = 1


class ConfigError(VadError):
    exit_code = EXIT_CONFIG


class StorageError(VadError):
    """Unreadable/unwritable paths, corrupt containers."""

    exit_code = EXIT_IO


class IngestionError(StorageError):
    pass


class ContractError(VadError):
    """A caller broke a precondition (shape, state, ordering)."""

    exit_code = EXIT_CONTRACT


class DimensionError(ContractError):
    pass


class DomainError(ContractError):
    pass


class UndefinedMetricError(ContractError):
    pass


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, VadError):
        return exc.exit_code
    if isinstance(exc, OSError):
        return EXIT_IO
    return 1
