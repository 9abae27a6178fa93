"""Exception hierarchy shared by every stage of the pipeline."""


class QsumError(Exception):
    """Base class; ``hint`` carries a remediation suggestion for the CLI."""

    hint = ""


class NonConvergence(QsumError):
    hint = "loosen the tolerance or bring |x| closer to 1"


class PreconditionViolated(QsumError):
    pass


class DomainMismatch(QsumError):
    pass


class TruncationError(QsumError):
    hint = "increase M_max so the m-profiles decay inside the grid"


class AlignmentError(QsumError):
    hint = "choose L divisible by every dilation denominator"


class ParameterError(QsumError):
    pass


class DivisorDegenerate(QsumError):
    pass


class GeometryViolation(QsumError):
    hint = "re-aim the Borel direction away from the divisor roots"


class NoAdmissibleDirection(QsumError):
    hint = "reduce the number of sectors or the minimum aperture"


class InsufficientData(QsumError):
    pass


class ModeUnsupported(QsumError):
    pass


class NonContraction(QsumError):
    hint = "reduce coefficient norms or enlarge the divisor root radius"


class DomainError(QsumError):
    hint = "keep eps*t inside the admissible domain of the Borel direction"


class QuadratureError(QsumError):
    hint = "extend the radial grid or refine L"


class InsufficientSignal(QsumError):
    hint = "widen the eps range or lower the noise floor"


class SchemaError(QsumError):
    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class ParseError(QsumError):
    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)


class StageError(QsumError):
    def __init__(self, stage, message, hint=""):
        self.stage = stage
        self.hint = hint
        text = f"stage {stage}: {message}"
        if hint:
            text += f" (hint: {hint})"
        super().__init__(text)
