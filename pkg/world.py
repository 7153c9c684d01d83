"""
The simulation registry: every service, client, vendor, reader, tag and location of a run, plus its clock.

Time is a discrete integer clock (1 tick = 1 simulated second) that only the
scenario driver moves forward. Closeness of times and locations is judged
with configurable thresholds, since the model only defines them qualitatively.
"""

import logging
import math
import os
import random
from dataclasses import dataclass, field, fields, replace
from typing import Any

logger = logging.getLogger(__name__)

type Timestamp = int

NONCE_SCOPES = ("tag_shipment", "tag", "service")


class SimulationError(Exception):
    """Base error for the simulated world."""


class ConfigurationError(SimulationError):
    """Raised for invalid parameters or scenario declarations, before anything runs."""


class ClockError(SimulationError):
    """Raised when the clock would move backwards."""


class DuplicateIdentifierError(SimulationError):
    """Raised when an identifier is registered twice in the same registry."""


class IndeterminateLocationError(SimulationError):
    """Raised when proximity cannot be judged: different labels and a missing coordinate."""


@dataclass(frozen=True)
class SimulationConfig:
    """Thresholds and intervals shared by every actor of a run."""

    close_threshold: int = 30
    apart_threshold: int = 120
    read_range: float = 10.0
    block_interval: int = 15
    forget_after: int = 3600
    quorum_size: int = 3
    tag_memory_bound: int = 4096
    nonce_scope: str = "tag_shipment"

    def __post_init__(self) -> None:
        if self.close_threshold < 0:
            raise ConfigurationError(f"close_threshold must be >= 0, got {self.close_threshold}")
        if self.apart_threshold <= self.close_threshold:
            raise ConfigurationError(
                f"apart_threshold ({self.apart_threshold}) must exceed close_threshold ({self.close_threshold})"
            )
        if self.read_range <= 0:
            raise ConfigurationError(f"read_range must be positive, got {self.read_range}")
        if self.block_interval <= 0:
            raise ConfigurationError(f"block_interval must be positive, got {self.block_interval}")
        if self.forget_after < 0:
            raise ConfigurationError(f"forget_after must be >= 0, got {self.forget_after}")
        if self.quorum_size < 1:
            raise ConfigurationError(f"quorum_size must be >= 1, got {self.quorum_size}")
        if self.tag_memory_bound < 0:
            raise ConfigurationError(f"tag_memory_bound must be >= 0, got {self.tag_memory_bound}")
        if self.nonce_scope not in NONCE_SCOPES:
            raise ConfigurationError(f"nonce_scope must be one of {NONCE_SCOPES}, got {self.nonce_scope!r}")

    @classmethod
    def from_env(cls) -> "SimulationConfig":
        try:
            return cls(
                close_threshold=int(os.getenv("CLOSE_THRESHOLD", "30")),
                apart_threshold=int(os.getenv("APART_THRESHOLD", "120")),
                read_range=float(os.getenv("READ_RANGE", "10.0")),
                block_interval=int(os.getenv("BLOCK_INTERVAL", "15")),
                forget_after=int(os.getenv("FORGET_AFTER", "3600")),
                quorum_size=int(os.getenv("QUORUM_SIZE", "3")),
                tag_memory_bound=int(os.getenv("TAG_MEMORY_BOUND", "4096")),
                nonce_scope=os.getenv("NONCE_SCOPE", "tag_shipment"),
            )
        except ValueError as e:
            raise ConfigurationError(f"Invalid simulation setting in environment: {e}") from e

    def with_overrides(self, overrides: dict[str, Any]) -> "SimulationConfig":
        """Return a copy with the given fields replaced; unknown keys are a configuration error."""
        known = {f.name for f in fields(self)}
        unknown = set(overrides) - known
        if unknown:
            raise ConfigurationError(f"Unknown config keys: {sorted(unknown)}")
        return replace(self, **overrides)


@dataclass(frozen=True)
class Location:
    """A named place; only logistical locations may host a reader."""

    label: str
    coordinates: tuple[float, float] | None = None
    logistical: bool = True


def time_close(t1: Timestamp, t2: Timestamp, threshold: int = 30) -> bool:
    """Within a few tens of seconds of each other."""
    return abs(t1 - t2) <= threshold


def time_apart(t1: Timestamp, t2: Timestamp, threshold: int = 120) -> bool:
    """Minutes or more apart. Between the two thresholds neither relation holds."""
    return abs(t1 - t2) >= threshold


def location_near(a: Location, b: Location, read_range: float = 10.0) -> bool:
    """Same label, or both placed and within read_range meters."""
    if a.label == b.label:
        return True
    if a.coordinates is None or b.coordinates is None:
        raise IndeterminateLocationError(f"Cannot compare {a.label!r} and {b.label!r}: missing coordinates")
    return math.dist(a.coordinates, b.coordinates) <= read_range


@dataclass
class World:
    """
    Registry of every actor in a run plus the clock.

    Actors are stored by their scenario name. The concrete types live in their
    own modules (tag, reader, vendor, service, chain); the world only enforces
    unique identifiers and the reader placement rule.
    """

    config: SimulationConfig = field(default_factory=SimulationConfig)
    seed: int = 0
    clock: Timestamp = 0
    services: dict[str, Any] = field(default_factory=dict)
    clients: dict[str, Any] = field(default_factory=dict)
    vendors: dict[str, Any] = field(default_factory=dict)
    readers: dict[str, Any] = field(default_factory=dict)
    tags: dict[str, Any] = field(default_factory=dict)
    locations: dict[str, Location] = field(default_factory=dict)
    chain: Any = None
    rng: random.Random = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.rng = random.Random(self.seed)

    # -- Clock --------------------------------------------------------------

    def advance_clock(self, delta: int) -> Timestamp:
        if delta < 0:
            raise ClockError(f"Clock cannot move backwards (delta={delta})")
        self.clock += delta
        return self.clock

    def time_close(self, t1: Timestamp, t2: Timestamp) -> bool:
        return time_close(t1, t2, self.config.close_threshold)

    def time_apart(self, t1: Timestamp, t2: Timestamp) -> bool:
        return time_apart(t1, t2, self.config.apart_threshold)

    def location_near(self, a: Location, b: Location) -> bool:
        return location_near(a, b, self.config.read_range)

    # -- Registries ---------------------------------------------------------

    def random_bytes(self, n: int) -> bytes:
        return self.rng.randbytes(n)

    def _register(self, registry: dict[str, Any], kind: str, name: str, obj: Any) -> Any:
        if name in registry:
            raise DuplicateIdentifierError(f"{kind} {name!r} is already registered")
        registry[name] = obj
        logger.debug(f"Registered {kind} {name!r}")
        return obj

    def add_location(self, location: Location) -> Location:
        return self._register(self.locations, "location", location.label, location)

    def add_service(self, name: str, service: Any) -> Any:
        return self._register(self.services, "service", name, service)

    def add_client(self, name: str, client: Any) -> Any:
        return self._register(self.clients, "client", name, client)

    def add_vendor(self, name: str, vendor: Any) -> Any:
        return self._register(self.vendors, "vendor", name, vendor)

    def add_tag(self, name: str, tag: Any) -> Any:
        return self._register(self.tags, "tag", name, tag)

    def add_reader(self, name: str, reader: Any) -> Any:
        """Readers must belong to a registered service and sit at a registered logistical location."""
        if reader.owner not in self.services:
            raise ConfigurationError(f"Reader {name!r} is owned by unknown service {reader.owner!r}")
        location = self.locations.get(reader.location.label)
        if location is None or not location.logistical:
            raise ConfigurationError(f"Reader {name!r} must sit at a logistical location, not {reader.location.label!r}")
        return self._register(self.readers, "reader", name, reader)

    def location(self, label: str) -> Location:
        try:
            return self.locations[label]
        except KeyError as e:
            raise ConfigurationError(f"Unknown location {label!r}") from e
