"""
Exception and warning types shared by the estimator modules and the CLI.

Each exception carries an ``exit_code`` that main.py maps to the process exit status:
2 validation, 3 convergence, 4 infeasible jackknife, 1 anything else.
"""


class CRTSurvError(Exception):
    """Base class for all errors raised by crtsurv."""

    exit_code = 1


class ValidationError(CRTSurvError, ValueError):
    exit_code = 2


class MissingColumn(ValidationError):
    pass


class NonBinaryArm(ValidationError):
    pass


class NonBinaryEvent(ValidationError):
    pass


class ArmVariesWithinCluster(ValidationError):
    pass


class CovariateVariesWithinCluster(ValidationError):
    pass


class NegativeTime(ValidationError):
    pass


class NonNumericCovariate(ValidationError):
    pass


class SingleArmDataset(ValidationError):
    pass


class TooFewClusters(ValidationError):
    pass


class NoEventsInArm(ValidationError):
    pass


class UnknownTerm(ValidationError):
    pass


class NoEventsInRole(ValidationError):
    pass


class NoSubjectsInArm(ValidationError):
    pass


class OracleArmMismatch(ValidationError):
    pass


class RoleMismatch(ValidationError):
    pass


class RatioDenominatorZero(ValidationError):
    pass


class TauBeyondGrid(ValidationError):
    pass


class InvalidGrid(ValidationError):
    pass


class InvalidPropensity(ValidationError):
    pass


class CensoringSurvivalUnderflow(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class ReportSchemaError(ValidationError):
    pass


class ConvergenceFailure(CRTSurvError, RuntimeError):
    exit_code = 3


class NonConvergence(ConvergenceFailure):
    pass


class SingularInformation(ConvergenceFailure):
    pass


class LeaveOneOutInfeasible(CRTSurvError, RuntimeError):
    """Removing one cluster leaves a replicate dataset the pipeline cannot fit."""

    exit_code = 4

    def __init__(self, cluster_label: str, reason: str):
        self.cluster_label = cluster_label
        self.reason = reason
        super().__init__(f"Leaving out cluster '{cluster_label}' is infeasible: {reason}")

    def __reduce__(self):
        return type(self), (self.cluster_label, self.reason)


class StudyFailure(CRTSurvError, RuntimeError):
    pass


class ThetaBoundaryWarning(UserWarning):
    """Frailty variance estimate collapsed to the upper shape bound (no detectable frailty)."""


class TauExtrapolationWarning(UserWarning):
    """An RMST horizon lies beyond the last grid point and the curve was step-extended."""
