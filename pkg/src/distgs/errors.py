"""Exception types raised across the pipeline."""


class DistGSError(Exception):
    """Base class; ``code`` is the short tag printed by the CLI."""

    code = "error"


class BehindCamera(DistGSError):
    code = "behind_camera"


class InvalidRig(DistGSError):
    code = "invalid_rig"


class InvalidCamera(DistGSError):
    code = "invalid_camera"


class InvalidConfig(DistGSError):
    code = "invalid_config"


class StaleForward(DistGSError):
    code = "stale_forward"


class UnknownKind(DistGSError):
    code = "unknown_kind"


class IsovalueOutOfRange(DistGSError):
    code = "isovalue_out_of_range"


class EmptyCloud(DistGSError):
    code = "empty_cloud"


class TooManyPartitions(DistGSError):
    code = "too_many_partitions"


class MismatchedCounts(DistGSError):
    code = "mismatched_counts"


class DimensionMismatch(DistGSError):
    code = "dimension_mismatch"


class TooSmall(DistGSError):
    code = "too_small"


class NoViews(DistGSError):
    code = "no_views"


class EmptyBand(DistGSError):
    code = "empty_band"


class EmptyInterior(DistGSError):
    code = "empty_interior"


class MissingBaseline(DistGSError):
    code = "missing_baseline"


class WorkerFailure(DistGSError):
    code = "worker_failure"

    def __init__(self, partition_id, detail=""):
        self.partition_id = partition_id
        super().__init__(f"partition {partition_id}: {detail}".rstrip(": "))


class Timeout(WorkerFailure):
    code = "timeout"


class ManifestMismatch(DistGSError):
    code = "manifest_mismatch"


class MalformedFile(DistGSError):
    code = "malformed_file"


class IoError(DistGSError):
    code = "io_error"
