"""Exception hierarchy shared across the package."""


class ModelAuditError(Exception):
    """Base class for every error raised by modelaudit."""


class DataError(ModelAuditError):
    pass


class EmptyFile(DataError):
    pass


class MalformedRow(DataError):
    def __init__(self, row_number, message):
        super().__init__(f"row {row_number}: {message}")
        self.row_number = row_number


class DuplicateColumn(DataError):
    def __init__(self, name):
        super().__init__(f"duplicate column name {name!r}")
        self.name = name


class AllMissing(DataError):
    def __init__(self, name):
        super().__init__(f"column {name!r} has no non-missing values")
        self.name = name


class IncoherentTarget(DataError):
    pass


class SchemaMismatch(DataError):
    pass


class SpecError(ModelAuditError):
    """Model spec failed validation. ``pointer`` is a JSON pointer into the document."""

    def __init__(self, message, pointer=""):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer


class InvalidNodeRef(SpecError):
    pass


class ArityMismatch(ModelAuditError):
    pass


class UnsupportedCapability(ModelAuditError):
    pass


class ScoringError(ModelAuditError):
    """Oracle failure, annotated with the row range being scored when known."""


class TransportError(ScoringError):
    pass


class ScorerTimeout(TransportError):
    pass


class ProtocolViolation(ScoringError):
    pass


class NonFiniteProbability(ProtocolViolation):
    pass


class RemoteScorerError(ScoringError):
    """The scorer answered with an ``error`` field."""


class SingleGroup(ModelAuditError):
    pass


class NotAdverse(ModelAuditError):
    pass


class NoSlices(ModelAuditError):
    pass


class UnsupportedFeatureKind(ModelAuditError):
    pass


class EmptyValidationSet(ModelAuditError):
    pass


class DivergenceError(ModelAuditError):
    def __init__(self, epoch, stage=None):
        where = f"stage {stage}, " if stage is not None else ""
        super().__init__(f"loss became non-finite at {where}epoch {epoch}")
        self.epoch = epoch
        self.stage = stage


class InvalidBundle(ModelAuditError):
    pass
