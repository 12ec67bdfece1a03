"""Exception types shared across the package."""


class DtsimError(Exception):
    """Base class for all errors raised by this package."""


class SchemaError(DtsimError):
    """An input file violates its schema.

    ``path`` points at the offending element, e.g. ``layers[2].tensors[0].dims``.
    """

    def __init__(self, path, message):
        self.path = path
        self.message = message
        super().__init__(f"{path}: {message}")


class StrategyError(DtsimError):
    """A strategy file or propagation step is inconsistent with the model."""


class CompileError(DtsimError):
    """Execution-graph compilation failed (cycle, unsatisfiable layout, ...)."""


class CostError(DtsimError):
    """Cost annotation failed; ``missing`` lists every unresolvable cost key."""

    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__(
            "missing cost entries (no table match, no throughput fallback): "
            + ", ".join(self.missing)
        )


class SimulationDeadlock(DtsimError):
    """The event queue drained with unfinished tasks; ``frontier`` names them."""

    def __init__(self, frontier):
        self.frontier = list(frontier)
        super().__init__(
            f"simulation deadlock; {len(self.frontier)} tasks unreachable, "
            f"stuck frontier: {', '.join(self.frontier[:10])}"
            + ("..." if len(self.frontier) > 10 else "")
        )
