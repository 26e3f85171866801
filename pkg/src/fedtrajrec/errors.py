"""Exception hierarchy.

Every error carries a short machine-readable ``code``; the CLI prints it as
the prefix of its single-line error message.
"""


class FedTrajError(Exception):
    code = "error"


class _ValueFlavour(FedTrajError, ValueError):
    pass


class InvalidDimensionError(_ValueFlavour):
    code = "invalid-dimension"


class UnknownEdgeError(_ValueFlavour, KeyError):
    code = "unknown-edge"

    def __str__(self):
        return Exception.__str__(self)


class UnknownNodeError(_ValueFlavour, KeyError):
    code = "unknown-node"

    def __str__(self):
        return Exception.__str__(self)


class OutOfExtentError(_ValueFlavour):
    code = "out-of-extent"


class NoCandidatesError(_ValueFlavour):
    code = "no-candidates"


class InvalidRatioError(_ValueFlavour):
    code = "invalid-ratio"


class InvalidRatiosError(_ValueFlavour):
    code = "invalid-ratios"


class TooFewTrajectoriesError(_ValueFlavour):
    code = "too-few-trajectories"


class MalformedRowError(_ValueFlavour):
    code = "malformed-row"

    def __init__(self, line, message):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ShapeMismatchError(_ValueFlavour):
    code = "shape-mismatch"


class LengthMismatchError(_ValueFlavour):
    code = "length-mismatch"


class IndexOutOfRangeError(_ValueFlavour, IndexError):
    code = "index-out-of-range"


class UnrecordedGraphError(FedTrajError, RuntimeError):
    code = "unrecorded-graph"


class LayoutMismatchError(_ValueFlavour):
    code = "layout-mismatch"


class NonFiniteGradientError(_ValueFlavour, FloatingPointError):
    code = "non-finite-gradient"


class VocabularyOverflowError(_ValueFlavour):
    code = "vocabulary-overflow"


class NegativeLambdaError(_ValueFlavour):
    code = "negative-lambda"


class OutOfRangeAccuracyError(_ValueFlavour):
    code = "out-of-range-accuracy"


class EmptySetError(_ValueFlavour):
    code = "empty-set"


class EmptyListError(_ValueFlavour):
    code = "empty-list"


class EmptyTrajectoryError(_ValueFlavour):
    code = "empty-trajectory"


class EmptyTeacherSubsetError(_ValueFlavour):
    code = "empty-teacher-subset"


class EmptyTrainSplitError(_ValueFlavour):
    code = "empty-train-split"


class CheckpointError(_ValueFlavour):
    code = "bad-checkpoint"


class ConfigError(_ValueFlavour):
    code = "invalid-config"


class NoRouteError(_ValueFlavour):
    code = "no-route"
