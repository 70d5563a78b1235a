"""Exception types raised across the toolchain."""


class DlaccError(Exception):
    """Base class for all toolchain errors."""


class ModelError(DlaccError, ValueError):
    """Malformed or inconsistent model (schema, references, shapes, weights)."""

    def __init__(self, message, node=None):
        self.node = node
        if node is not None:
            message = f"node {node}: {message}"
        super().__init__(message)


class EvalError(DlaccError, ValueError):
    """Operand shapes or dtypes do not match an operation's signature."""


class PartitionError(DlaccError):
    """A partition violates coverage, disjointness or ordering."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class InsufficientSram(DlaccError):
    """Even a single output channel of an operation does not fit in SRAM."""

    def __init__(self, node, required, available):
        self.node = node
        self.required = required
        self.available = available
        super().__init__(
            f"op {node}: needs {required} bytes of SRAM for one output channel, "
            f"only {available} available"
        )


class UnsupportedOpcode(DlaccError):
    """The ISA variant cannot execute the requested operation."""


class StreamError(DlaccError):
    """Command stream is invalid or faulted during execution."""
