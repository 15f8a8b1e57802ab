"""Exception types shared across the package.

Every error raised by guimem derives from GuimemError so callers can catch
the package's failures with one handler while still distinguishing the
specific condition (the agent loop, for example, reacts differently to
MalformedLabel than to UnknownVerb).
"""


class GuimemError(Exception):
    """Base class for all guimem errors."""


# --- action grammar ---------------------------------------------------------

class UnknownVerb(GuimemError):
    """The action line does not start with one of the five known verbs."""


class MissingArgument(GuimemError):
    """A verb was recognised but a required argument is absent or invalid."""


class MalformedLabel(GuimemError):
    """A CLICK/TYPE target is not a bracketed integer label.

    Carries the free-text target description (everything after the verb) so
    the agent loop can attempt grounding fallback.
    """

    def __init__(self, message: str, description: str = ""):
        super().__init__(message)
        self.description = description


# --- urls / serialization ---------------------------------------------------

class InvalidUrl(GuimemError):
    """URL is not a syntactically valid absolute http(s) URL."""


class CorruptManifest(GuimemError):
    """Stored manifest bytes do not match their recorded digest."""


class SchemaVersionMismatch(GuimemError):
    """A stored artifact declares a format_version this code does not read."""


# --- retrieval --------------------------------------------------------------

class EmptyTrajectory(GuimemError):
    """Key construction requires at least one step."""


class EmbedderFailure(GuimemError):
    """An embedder call failed; carries the step index when applicable."""

    def __init__(self, message: str, step_index: int | None = None):
        super().__init__(message)
        self.step_index = step_index


class DimensionMismatch(GuimemError):
    """Vector dimension differs from the index/bank dimension."""


# --- encoder / bank / training ----------------------------------------------

class EmptyStream(GuimemError):
    """The trajectory token stream has zero rows."""


class ShapeMismatch(GuimemError):
    """An array does not have the shape the operation requires."""


class WidthMismatch(GuimemError):
    """Embedding widths disagree between memory payloads and prompt."""


class SelfLeakage(GuimemError):
    """A trajectory's own key surfaced among its retrieved training memories."""


class BudgetExceeded(GuimemError):
    """Trainable parameter fraction exceeds the configured budget."""


class NonFiniteLoss(GuimemError):
    """Training produced a NaN or infinite loss."""


# --- clients / environments --------------------------------------------------

class SearchClientError(GuimemError):
    """A search query failed; per-query, non-fatal to an iteration."""


class ChatClientError(GuimemError):
    """A chat-with-images call failed."""


class NavigationTimeout(GuimemError):
    """Opening a page timed out; the environment counts as blocked."""


class EnvironmentCrash(GuimemError):
    """The environment died mid-episode; the trajectory is truncated."""


class ModeUnsupportedByClient(GuimemError):
    """The policy client cannot accept the assembled request (e.g. a pure
    chat client handed injected embeddings)."""


class PolicyClientError(GuimemError):
    """The policy model call failed."""


class GroundingFailure(GuimemError):
    """No label could be resolved for a target description."""


class AnnotatorFailure(GuimemError):
    """The SOM annotator produced invalid output (duplicate ids, bad boxes)."""


# --- prompts / parsing -------------------------------------------------------

class MissingSlot(GuimemError):
    """A prompt template slot was not supplied."""


class ParseFailure(GuimemError):
    """A structured model reply line could not be parsed."""


class UnparseableVerdict(GuimemError):
    """A judge reply contained no recognisable verdict."""


class DegenerateDesign(GuimemError):
    """The regression design matrix is rank-deficient for the requested fit."""
