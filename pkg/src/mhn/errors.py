"""Exception hierarchy shared by every module."""


class MHNError(Exception):
    """Base class for all toolkit errors."""


class InvalidGraph(MHNError):
    pass


class NonIntegerStride(MHNError):
    pass


class UnknownOutput(MHNError):
    pass


class InvalidBackbone(MHNError):
    pass


class NoOutputs(MHNError):
    pass


class ShapeMismatch(MHNError):
    def __init__(self, message, node_id=None):
        if node_id is not None:
            message = f"node {node_id!r}: {message}"
        super().__init__(message)
        self.node_id = node_id


class DegenerateROI(MHNError):
    pass


class InvalidRange(MHNError):
    pass


class SplitMismatch(MHNError):
    pass


class NonFiniteRegression(MHNError):
    pass


class NoGroundTruth(MHNError):
    pass


class MalformedLine(MHNError):
    def __init__(self, lineno, message):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno
