"""Domain exceptions shared across the package."""


class ShapeError(ValueError):
    """Tensor or kernel dimensions do not fit the requested operation."""


class DataFormatError(ValueError):
    """A dataset file does not match its binary format contract."""


class ConfigError(ValueError):
    """A run configuration is malformed (unknown key, bad value, ...)."""


class DegenerateWeightsError(RuntimeError):
    """All importance weights collapsed to ~0; the estimate is meaningless."""


class NanLossError(RuntimeError):
    """Training produced a non-finite loss; carries layer/epoch context."""

    def __init__(self, layer: int, epoch: int, detail: str = ""):
        self.layer = layer
        self.epoch = epoch
        msg = f"non-finite loss at layer {layer}, epoch {epoch}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
