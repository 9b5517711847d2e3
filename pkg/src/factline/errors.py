"""Exception hierarchy shared across the platform."""


class FactlineError(Exception):
    """Base class for all platform errors."""


# -- core model ---------------------------------------------------------------

class UnrecognizedValue(FactlineError):
    """Raw value matches no configured synonym list; route to QA/QC."""


class UnmappedValue(FactlineError):
    """Value absent from the mapping scheme."""


class UnknownConcept(FactlineError):
    pass


# -- broker -------------------------------------------------------------------

class UnknownQueue(FactlineError):
    pass


class UnknownJob(FactlineError):
    pass


class LeaseExpired(FactlineError):
    pass


class BodyTooLarge(FactlineError):
    pass


# -- stores -------------------------------------------------------------------

class KeyExists(FactlineError):
    pass


class NotFound(FactlineError):
    pass


class ChecksumMismatch(FactlineError):
    pass


class ValidationFailed(FactlineError):
    """One or more facts failed warehouse validation.

    ``violations`` maps the offending fact id to its validation report.
    """

    def __init__(self, violations):
        self.violations = violations
        super().__init__(f"{len(violations)} fact(s) failed validation")


class Conflict(FactlineError):
    """Same natural key, different value; a QA/QC row has been opened."""


# -- synth-ehr ----------------------------------------------------------------

class EmptySample(FactlineError):
    pass


class UnknownCategory(FactlineError):
    pass


# -- ingest -------------------------------------------------------------------

class UnknownSource(FactlineError):
    pass


class Unauthorized(FactlineError):
    pass


class BatchNotStaged(FactlineError):
    pass


class UnsupportedFormat(FactlineError):
    pass


class SchemaMismatch(FactlineError):
    pass


# -- etl / qaqc ---------------------------------------------------------------

class NoNewerVersion(FactlineError):
    pass


class UnknownTranslator(FactlineError):
    pass


class AlreadyMitigated(FactlineError):
    pass


class RefusedNeedsUpgrade(FactlineError):
    """Resume after a QA-initiated halt requires a newer config version."""


# -- cohort -------------------------------------------------------------------

class UnknownOperation(FactlineError):
    pass


class CyclicConstraint(FactlineError):
    pass


class SnapshotUnavailable(FactlineError):
    pass


# -- analysis -----------------------------------------------------------------

class EmptyColumn(FactlineError):
    pass


class InsufficientData(FactlineError):
    pass


class DegenerateGroups(FactlineError):
    """Zero variance where the statistic is undefined."""


class ArityMismatch(FactlineError):
    pass
