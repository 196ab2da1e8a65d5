"""Exception hierarchy shared by every stage of the pipeline."""


class LidarOdomError(Exception):
    pass


class DegenerateAnchors(LidarOdomError, ValueError):
    """Anchor points cannot define a line (coincident) or a plane (collinear)."""


class UnderConstrained(LidarOdomError):
    """Fewer than six effective scalar residuals were supplied to the solver."""


class SingularNormalEquations(LidarOdomError):
    pass


class MalformedFile(LidarOdomError, ValueError):
    pass


class ParseError(LidarOdomError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyTree(LidarOdomError, ValueError):
    pass


class InsufficientNeighbors(LidarOdomError, IndexError):
    pass


class InsufficientFeatures(LidarOdomError):
    pass


class DegenerateNeighborhood(LidarOdomError):
    pass


class NoOverlap(LidarOdomError, ValueError):
    pass


class ConfigError(LidarOdomError, ValueError):
    pass
