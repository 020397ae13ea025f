"""Exception hierarchy shared by all pipeline stages.

Every error raised by this package derives from :class:`CtNarrateError`, so
callers can catch one base class at the pipeline boundary. The CLI maps the
three broad families (config, provider, pipeline) to distinct exit codes.
"""


class CtNarrateError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(CtNarrateError):
    """Invalid or incomplete pipeline configuration."""


class ProviderError(CtNarrateError):
    """Base class for failures attributable to an external provider."""


# --- volume ----------------------------------------------------------------

class MalformedHeader(CtNarrateError):
    """File is not a parseable NIfTI-1 image (bad magic, size, or dims)."""


class UnsupportedDimensionality(CtNarrateError):
    """Image is not a 3D volume (2D slices and 4D series are rejected)."""


class DegenerateSpacing(CtNarrateError):
    """A voxel spacing component is zero or negative."""


class SliceOutOfRange(CtNarrateError):
    """Requested slice index lies outside the volume."""


# --- report ----------------------------------------------------------------

class ProviderFailure(ProviderError):
    """Remote provider was unreachable or returned a transport-level error."""


class MalformedProviderOutput(ProviderError):
    """Provider responded, but the payload violates the documented contract."""


class UnknownOrganLabel(ProviderError):
    """Provider named an organ that is not in the 201-entry vocabulary."""

    def __init__(self, label: str):
        super().__init__(f"organ label not in vocabulary: {label!r}")
        self.label = label


# --- segmentation ----------------------------------------------------------

class EmptyMask(CtNarrateError):
    """Mask has no foreground voxels (organ absent or fell outside the grid)."""


class DimsMismatch(CtNarrateError):
    """Mask grid does not match the volume it claims to annotate."""


# --- registration ----------------------------------------------------------

class NoOverlap(CtNarrateError):
    """Fixed and moving volumes share no physical extent."""


class GridMismatch(CtNarrateError):
    """Two volumes expected on an identical grid differ in dims or spacing."""


class DegenerateGrid(CtNarrateError):
    """Target grid spec has nonpositive dims or spacing."""


# --- organ3d ---------------------------------------------------------------

class DegenerateMesh(CtNarrateError):
    """Mesh has no triangles."""


# --- storyboard ------------------------------------------------------------

class DurationBudgetExceeded(CtNarrateError):
    """Planned narration exceeds the configured video length budget."""

    def __init__(self, total: float, budget: float, breakdown: list):
        lines = ", ".join(f"{fid}/p{ph}={d:.1f}s" for fid, ph, d in breakdown)
        super().__init__(
            f"storyboard runs {total:.1f}s but the budget is {budget:.1f}s ({lines})"
        )
        self.total = total
        self.budget = budget
        self.breakdown = breakdown


class ZeroFrames(CtNarrateError):
    """Duration times fps rounds to zero frames."""


# --- media -----------------------------------------------------------------

class LayoutOverflow(CtNarrateError):
    """Caption does not fit its band even at the minimum font size."""


class EncoderFailure(CtNarrateError):
    """External encoder exited nonzero; stderr is attached."""

    def __init__(self, cmd: list, returncode: int, stderr: str):
        super().__init__(f"encoder exited {returncode}: {' '.join(cmd)}")
        self.cmd = cmd
        self.returncode = returncode
        self.stderr = stderr


class AvSyncMismatch(CtNarrateError):
    """Frame count and audio duration disagree by a frame or more."""


# --- cli / staging ---------------------------------------------------------

class MissingUpstreamArtifact(CtNarrateError):
    """A staged command needs a cached artifact that has not been produced."""


class PipelineFailure(CtNarrateError):
    """A pipeline stage failed; carries the stage name for the error record."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
