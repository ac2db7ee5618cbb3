"""Exception hierarchy shared by all modules.

Each class carries the process exit code the CLI maps it to.
"""


class ChunkflowError(Exception):
    exit_code = 1


class ConfigError(ChunkflowError, ValueError):
    exit_code = 2


class ShapeError(ChunkflowError, ValueError):
    exit_code = 2


class DegenerateInputError(ChunkflowError, ValueError):
    exit_code = 2


class DivergenceError(ChunkflowError, ArithmeticError):
    exit_code = 3


class InfeasibleError(ChunkflowError):
    exit_code = 4

    def __init__(self, message, unmatched_rows=()):
        super().__init__(message)
        self.unmatched_rows = list(unmatched_rows)
