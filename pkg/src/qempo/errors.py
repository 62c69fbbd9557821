"""Exception types raised across the package."""

from __future__ import annotations


class QempoError(Exception):
    """Base class for all package errors."""


class InvalidArgument(QempoError, ValueError):
    pass


class SupportMismatch(QempoError, ValueError):
    """A log or ratio was requested where a probability is zero."""


class ResourceLimit(QempoError):
    """An enumeration would exceed the tractability guard."""


class EvaluationFailure(QempoError):
    pass


class ScenarioError(InvalidArgument):
    """A scenario or policy file failed to parse or validate.

    ``path`` is a JSON-style field path such as ``instances[2].candidates[0].ref_prob``.
    """

    def __init__(self, message: str, *, source: str | None = None, path: str | None = None,
                 instance_id: str | None = None, line: int | None = None):
        self.source = source
        self.path = path
        self.instance_id = instance_id
        self.line = line
        where = []
        if source:
            where.append(source if line is None else f"{source}:{line}")
        if instance_id is not None:
            where.append(f"instance {instance_id!r}")
        if path:
            where.append(path)
        prefix = ", ".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class ConvergenceFailure(QempoError):
    """The dual ascent did not satisfy the KKT conditions within ``max_iters``."""

    def __init__(self, message: str, *, multipliers: dict, residuals: dict, iterations: int):
        self.multipliers = multipliers
        self.residuals = residuals
        self.iterations = iterations
        super().__init__(f"{message} (after {iterations} iterations; "
                         f"multipliers={multipliers}, residuals={residuals})")


class TrainingFailure(QempoError):
    """A training loss became non-finite."""

    def __init__(self, step: int, last_finite_loss: float | None):
        self.step = step
        self.last_finite_loss = last_finite_loss
        super().__init__(f"non-finite loss at step {step} "
                         f"(last finite loss: {last_finite_loss})")
