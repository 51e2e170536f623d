"""Exception and warning types raised across the harness.

Every domain failure derives from :class:`TlbenchError`; the CLI maps those to
exit code 1.
"""
from __future__ import annotations


class TlbenchError(Exception):
    """Base class for domain errors."""


class SchemaError(TlbenchError):
    """Manifest header or content violates the manifest schema."""


class RowError(TlbenchError):
    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row


class ImputationError(TlbenchError):
    """No observed values to impute from."""


class RangeError(TlbenchError):
    """A value lies outside its permitted range."""


class MissingValueError(TlbenchError):
    """A required field is missing (e.g. age before grouping)."""


class EmptyDatasetError(TlbenchError):
    """An operation produced, or was given, zero records."""


class DecodeError(TlbenchError):
    def __init__(self, image_ref: str, reason: str = ""):
        msg = f"cannot decode image {image_ref!r}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)
        self.image_ref = image_ref


class PlanError(TlbenchError):
    """Balancing targets are inconsistent with existing counts."""


class PartialPlanError(TlbenchError):
    def __init__(self, completed: list, cause: BaseException):
        super().__init__(
            f"balancing plan aborted after {len(completed)} completed cell(s) "
            f"{completed}: {cause}"
        )
        self.completed = completed


class RegistryError(TlbenchError):
    """Unknown name looked up in a closed registry."""


class BackboneUnavailableError(TlbenchError):
    """Backbone architecture or its pretrained weights cannot be loaded."""


class ConfigError(TlbenchError):
    """Invalid configuration value."""


class TrainingDiverged(TlbenchError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite loss {loss} in epoch {epoch}")
        self.epoch = epoch


class ShapeError(TlbenchError):
    """Array shapes do not agree with the operation contract."""


class UndefinedAUCError(TlbenchError):
    """ROC/AUC requested for labels containing a single class."""


class LayerSelectionError(TlbenchError):
    """Requested Grad-CAM layer does not yield a spatial feature map."""


class MissingArtifactError(TlbenchError):
    def __init__(self, artifact: str, producer: str):
        super().__init__(
            f"missing {artifact}; run `tlbench {producer}` first to produce it"
        )
        self.artifact = artifact
        self.producer = producer


class StratumTooSmallWarning(UserWarning):
    """Stratum cannot be spread across the requested splits."""


class MetricConsistencyWarning(UserWarning):
    """Claimed metrics disagree with those recomputed from a confusion matrix."""
