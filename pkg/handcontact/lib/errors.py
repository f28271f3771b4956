"""Exception types raised by the hand contact pipeline.

Structural problems in model output are not exceptions; see
`prompt_engine.Violation`.
"""

from __future__ import annotations

from typing import Iterable, List, Optional


class HandContactError(Exception):
    """Base class for every error raised by handcontact."""


class ConfigError(HandContactError):
    pass


class ParseError(HandContactError):
    pass


class TopologyError(HandContactError):
    pass


class PartitionError(HandContactError):
    def __init__(self, message: str, vertex_ids: Iterable[int] = ()) -> None:
        self.vertex_ids: List[int] = sorted(set(int(v) for v in vertex_ids))
        super().__init__(f"{message}: {self.vertex_ids}" if self.vertex_ids else message)


class GridMismatchError(HandContactError):
    pass


class UnknownPartError(HandContactError):
    def __init__(self, part_name: str) -> None:
        self.part_name = part_name
        super().__init__(f"Unknown part: {part_name}")


class ShapeError(HandContactError):
    pass


class DisconnectedPartError(HandContactError):
    pass


class SeedNotInPartError(HandContactError):
    pass


class RenderError(HandContactError):
    pass


class MissingContextError(HandContactError):
    def __init__(self, placeholder: str) -> None:
        self.placeholder = placeholder
        super().__init__(placeholder)


class TransportError(HandContactError):
    pass


class AuthError(HandContactError):
    pass


class BackendFormatError(HandContactError):
    pass


class EncodeError(HandContactError):
    pass


class UnknownModelError(HandContactError):
    def __init__(self, model: str) -> None:
        self.model = model
        super().__init__(f"No pricing entry for model: {model}")


class LengthMismatchError(HandContactError):
    pass


class EmptyDatasetError(HandContactError):
    pass


class MissingImageError(HandContactError):
    def __init__(self, sample_ids: Iterable[str], message: Optional[str] = None) -> None:
        self.sample_ids: List[str] = list(sample_ids)
        super().__init__(message or f"Missing images for samples: {', '.join(self.sample_ids)}")
