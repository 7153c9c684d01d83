"""
Passive RFID tags: an unclonable id, a small rewritable memory, and where the
tag physically is over time.
"""

import bisect
import logging
from dataclasses import dataclass, field

from world import Location, SimulationError, Timestamp, World

logger = logging.getLogger(__name__)

TAG_ID_SIZE = 32
DEFAULT_MEMORY_BOUND = 4096

type TagId = bytes


class UnclonabilityViolation(SimulationError):  # noqa: N818 -- a broken model assumption, fatal to the run
    """Two live tags ended up with the same id."""


class OrderingError(SimulationError):
    """Raised when a move or write is timestamped before the tag's latest event."""


class CapacityError(SimulationError):
    """Raised when written data exceeds the tag's memory bound."""


@dataclass
class Tag:
    id: TagId
    memory_bound: int = DEFAULT_MEMORY_BOUND
    # (t, data) in write order; data(t) is the latest write at or before t
    writes: list[tuple[Timestamp, bytes]] = field(default_factory=list)
    # (t, location) with strictly increasing t; loc(t) is the latest move at or before t
    location_history: list[tuple[Timestamp, Location]] = field(default_factory=list)

    @property
    def memory(self) -> bytes:
        return self.writes[-1][1] if self.writes else b""

    def data(self, t: Timestamp) -> bytes:
        index = bisect.bisect_right([w[0] for w in self.writes], t)
        return self.writes[index - 1][1] if index else b""

    def loc(self, t: Timestamp) -> Location:
        index = bisect.bisect_right([h[0] for h in self.location_history], t)
        if not index:
            # Before creation the tag was already at its first recorded place
            return self.location_history[0][1]
        return self.location_history[index - 1][1]


def create_tag(world: World, location: Location, name: str | None = None) -> Tag:
    """A fresh tag with an id drawn from the world's seeded generator and an empty memory."""
    tag_id = world.random_bytes(TAG_ID_SIZE)
    if any(existing.id == tag_id for existing in world.tags.values()):
        raise UnclonabilityViolation(f"Tag id {tag_id.hex()[:12]} drawn twice")
    tag = Tag(id=tag_id, memory_bound=world.config.tag_memory_bound, location_history=[(world.clock, location)])
    world.add_tag(name or tag_id.hex(), tag)
    logger.debug(f"Created tag {tag_id.hex()[:12]} at {location.label}")
    return tag


def move_tag(tag: Tag, t: Timestamp, to: Location) -> Tag:
    last = tag.location_history[-1][0]
    if t <= last:
        raise OrderingError(f"Move at t={t} does not follow the last move at t={last}")
    tag.location_history.append((t, to))
    return tag


def tag_read(tag: Tag, t: Timestamp) -> tuple[TagId, bytes]:
    return tag.id, tag.data(t)


def tag_write(tag: Tag, t: Timestamp, data: bytes) -> Tag:
    if len(data) > tag.memory_bound:
        raise CapacityError(f"{len(data)} bytes exceed the tag memory bound of {tag.memory_bound}")
    if tag.writes and t < tag.writes[-1][0]:
        raise OrderingError(f"Write at t={t} precedes the last write at t={tag.writes[-1][0]}")
    tag.writes.append((t, data))
    return tag
