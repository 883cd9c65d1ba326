class InputError(ValueError):
    """Raised when an operation rejects its input (bad shape, degenerate box, ...)."""


class InvariantError(AssertionError):
    """Raised by validators when a data-structure invariant is violated.

    ``invariant`` holds a short machine-readable name of the violated rule.
    """

    def __init__(self, invariant, message):
        super().__init__(f"[{invariant}] {message}")
        self.invariant = invariant
