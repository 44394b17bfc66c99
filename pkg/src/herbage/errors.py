"""Exception hierarchy shared by all pipeline stages."""


class PipelineError(Exception):
    """Base class for all pipeline failures."""


class DataError(PipelineError):
    """Invalid input data: manifests, labels, images, coordinates."""


class TrainingError(PipelineError):
    """Runtime failure during an optimization loop (e.g. non-finite loss)."""
