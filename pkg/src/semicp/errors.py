"""Exception hierarchy shared by every stage of the pipeline."""


class SemICPError(Exception):
    """Base class for all registration errors."""


class EmptyCloud(SemICPError):
    pass


class LabelMismatch(SemICPError):
    def __init__(self, labels):
        self.labels = sorted(int(v) for v in labels)
        super().__init__(f"source labels without target counterpart: {self.labels}")


class InsufficientLabels(SemICPError):
    pass


class TooFewPoints(SemICPError):
    pass


class DegenerateExtent(SemICPError):
    pass


class MissingLabelIndex(SemICPError):
    def __init__(self, labels):
        self.labels = sorted(int(v) for v in labels)
        super().__init__(f"no target index for source labels {self.labels}")


class MissingNormals(SemICPError):
    pass


class NonFiniteGradient(SemICPError):
    pass


class NonFiniteLoss(SemICPError):
    pass


class OutOfGrid(SemICPError):
    def __init__(self, index, point):
        self.index = int(index)
        self.point = tuple(float(v) for v in point)
        super().__init__(f"point {self.index} at {self.point} lies outside the control grid [-1, 1]^3")


class LengthMismatch(SemICPError):
    pass


class AllCellsFolded(SemICPError):
    pass


class FoldedGroundTruth(SemICPError):
    pass


class FormatError(SemICPError):
    """Malformed or version-incompatible artifact file."""
