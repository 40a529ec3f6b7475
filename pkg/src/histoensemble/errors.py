"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures onto its
documented codes: 2 config, 3 data, 4 model, 5 internal.
"""

from __future__ import annotations


class HistoEnsembleError(Exception):
    exit_code = 5


class ConfigError(HistoEnsembleError):
    exit_code = 2


class DataError(HistoEnsembleError):
    exit_code = 3


class ModelError(HistoEnsembleError):
    exit_code = 4


# data pipeline
class MissingClassDir(DataError):
    pass


class EmptyClass(DataError):
    pass


class DecodeError(DataError):
    pass


class ChannelError(DataError):
    pass


class TooFewSamples(DataError):
    pass


class FoldError(DataError):
    pass


class LabelError(DataError):
    pass


class ShapeError(DataError):
    pass


class EmptyInput(DataError):
    pass


# features
class BackboneLoadError(ModelError):
    pass


class NumericError(DataError):
    pass


class CacheMiss(HistoEnsembleError):
    pass


class StaleCache(HistoEnsembleError):
    pass


# classifiers / ensembles
class DegenerateLabels(DataError):
    pass


class HyperparamError(ConfigError):
    pass


class BundleError(ModelError):
    pass


class IncompleteGrid(DataError):
    pass


class SelectionError(ConfigError):
    pass


class EnsembleError(ModelError):
    pass


class WeightError(ConfigError):
    pass


class StageError(HistoEnsembleError):
    """A module error re-raised with the pipeline stage it happened in."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 5)
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
