class ConfigError(ValueError):
    """Invalid hyperparameters, ratios, or a dataset that cannot support the requested run."""


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class TrainingDiverged(RuntimeError):
    """The objective or a gradient became non-finite during training."""
