class ConfigError(ValueError):
    """Invalid configuration; the CLI maps this to exit code 2."""


class NumericalAbort(RuntimeError):
    """A training step produced a non-finite loss; the CLI exits with code 3."""

    def __init__(self, iteration: int, terms: dict):
        self.iteration = iteration
        self.terms = terms
        dump = ", ".join(f"{k}={v!r}" for k, v in terms.items())
        super().__init__(f"non-finite loss at iteration {iteration}: {dump}")


class CheckpointError(ValueError):
    pass
