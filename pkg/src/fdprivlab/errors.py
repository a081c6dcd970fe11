"""Exception types shared across the package."""


class ValidationError(ValueError):
    """An input violates a documented precondition."""


class ShapeError(ValidationError):
    """Array dimensions do not compose."""


class TrainingError(RuntimeError):
    """Training produced a non-finite loss or otherwise aborted."""


class PipelineError(RuntimeError):
    """A stage of an experiment failed; records where."""

    def __init__(self, module: str, round_: int | None, client: int | None, cause: BaseException):
        self.module, self.round, self.client, self.cause = module, round_, client, cause
        where = [module]
        if round_ is not None:
            where.append(f"round {round_}")
        if client is not None:
            where.append(f"client {client}")
        super().__init__(f"{', '.join(where)}: {cause}")
