"""Exception hierarchy shared by every topoguard module."""


class TopoguardError(Exception):
    """Base class; ``kind`` is the stable machine-readable error tag."""

    kind = "error"


class InvalidParameter(TopoguardError, ValueError):
    kind = "invalid-parameter"


class InvalidPose(TopoguardError, ValueError):
    kind = "invalid-pose"


class InvalidInput(TopoguardError, ValueError):
    kind = "invalid-input"


class NumericOverflow(TopoguardError, ArithmeticError):
    kind = "numeric-overflow"


class NumericUnderflow(TopoguardError, ArithmeticError):
    kind = "numeric-underflow"


class MissingIdentity(TopoguardError, KeyError):
    kind = "missing-identity"


class DegenerateInput(TopoguardError, ValueError):
    kind = "degenerate-input"


class NoPositive(TopoguardError, LookupError):
    kind = "no-positive"


class NoNegative(TopoguardError, LookupError):
    kind = "no-negative"


class EmptyBatch(TopoguardError, ValueError):
    kind = "empty-batch"


class ConvergenceFailure(TopoguardError, RuntimeError):
    kind = "convergence-failure"

    def __init__(self, message, residual=float("nan"), plan=None):
        super().__init__(message)
        self.residual = residual
        self.plan = plan


class SizeLimit(TopoguardError, ValueError):
    kind = "size-limit"


class InvalidMarginals(TopoguardError, ValueError):
    kind = "invalid-marginals"


class PersistenceError(TopoguardError, OSError):
    kind = "persistence-error"


class InvalidEvalSetup(TopoguardError, ValueError):
    kind = "invalid-eval-setup"


class TrainingFailure(TopoguardError, RuntimeError):
    kind = "training-failure"

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class StageFailure(TopoguardError, RuntimeError):
    kind = "stage-failure"

    def __init__(self, stage, message, manifest=None):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage
        self.manifest = manifest or {}
