"""Exception hierarchy.

Every error carries a short ``category`` token; the CLI prints errors as
``<category>: <message>`` on a single line.
"""


class VPHypeError(Exception):
    category = "error"

    def __str__(self) -> str:
        return " ".join(super().__str__().split())


class DimensionError(VPHypeError, ValueError):
    category = "dimension"


class ConfigError(VPHypeError, ValueError):
    category = "config"


class ContractError(VPHypeError, ValueError):
    category = "contract"


class StateError(VPHypeError, RuntimeError):
    category = "state"


class FormatError(VPHypeError, ValueError):
    category = "format"


class TaskIdError(VPHypeError, IndexError):
    category = "task-id"


class LabelError(VPHypeError, ValueError):
    category = "label"


class SplitError(VPHypeError, ValueError):
    category = "split"


class EmptyEvaluationError(VPHypeError, ValueError):
    category = "empty-evaluation"


class CheckpointError(VPHypeError, ValueError):
    category = "checkpoint"


class TrainingError(VPHypeError, RuntimeError):
    category = "training"
