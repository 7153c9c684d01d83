"""
Pytest configuration and shared fixtures for the RFID evidence tests.
"""

from dataclasses import dataclass

import pytest

from chain import ChainNetwork
from crypto import CryptoSuite, use_suite
from reader import Evidence, Readout, Reader, observe
from service import Client, LogisticsService, ingest_readout, provision_n
from tag import Tag, create_tag
from vendor import Certificate, PkiStub, Vendor, issue_certificate
from verifier import ChainView
from world import Location, SimulationConfig, World

SETTINGS = (
    "LOG_LEVEL",
    "HASH_ALGORITHM",
    "SIGNATURE_SCHEME",
    "BLOCK_INTERVAL",
    "CLOSE_THRESHOLD",
    "APART_THRESHOLD",
    "READ_RANGE",
    "FORGET_AFTER",
    "QUORUM_SIZE",
    "TAG_MEMORY_BOUND",
    "NONCE_SCOPE",
    "RPC_LISTEN_PORT",
    "RPC_TIMEOUT",
    "RPC_MAX_ANSWER_BYTES",
)


@pytest.fixture(autouse=True)
def default_settings(monkeypatch):
    """Every test starts from the documented defaults, whatever the shell exports."""
    for name in SETTINGS:
        monkeypatch.delenv(name, raising=False)
    previous = use_suite(CryptoSuite())
    yield
    use_suite(previous)


@pytest.fixture
def mock_env(monkeypatch):
    """Non-default simulation settings in the environment."""
    values = {
        "BLOCK_INTERVAL": "10",
        "CLOSE_THRESHOLD": "20",
        "APART_THRESHOLD": "90",
        "QUORUM_SIZE": "5",
        "NONCE_SCOPE": "tag",
        "LOG_LEVEL": "DEBUG",
    }
    for name, value in values.items():
        monkeypatch.setenv(name, value)
    return values


@pytest.fixture
def dock() -> Location:
    return Location(label="cross-dock-7", coordinates=(0.0, 0.0))


@pytest.fixture
def world(dock) -> World:
    w = World(config=SimulationConfig(), seed=3)
    w.add_location(dock)
    w.add_location(Location(label="overflow-yard", coordinates=(500.0, 0.0)))
    return w


@pytest.fixture
def pki() -> PkiStub:
    return PkiStub()


@pytest.fixture
def vendor(pki) -> Vendor:
    v = Vendor.create("acme-readers", b"test:vendor")
    pki.register(v.keypair.public, 0, 10**9)
    return v


@pytest.fixture
def network(pki) -> ChainNetwork:
    return ChainNetwork.build(count=3, pki=pki)


@dataclass
class Pipeline:
    """A certified reader feeding one service and a three-node chain."""

    world: World
    pki: PkiStub
    network: ChainNetwork
    vendor: Vendor
    reader: Reader
    certificate: Certificate
    service: LogisticsService
    client: Client
    tag: Tag

    def view(self, **kwargs) -> ChainView:
        return ChainView(nodes=list(self.network.nodes.values()), pki=self.pki, **kwargs)

    def deliver(self, t: int) -> None:
        """Flush the reader's outbox without loss: readouts to the service, evidences to the chain."""
        for delivery in list(self.reader.outbox):
            if isinstance(delivery.payload, Readout):
                ingest_readout(self.service, delivery.payload, t)
            else:
                self.network.submit(delivery.destination, delivery.payload, t)
        self.reader.outbox.clear()

    def seal(self, t: int) -> None:
        self.deliver(t)
        self.network.gossip_until_quiet(t)
        self.network.create_block(t)

    def observe(self, t: int, n: bytes, write: bytes | None = None) -> tuple[Readout, Evidence]:
        return observe(self.reader, self.tag, t, n, write_data=write)


@pytest.fixture
def pipeline(world, pki, network, vendor, dock) -> Pipeline:
    """Certificate sealed in the block at t=15, nothing observed yet."""
    service = LogisticsService.create("carrier-1", seed=3)
    world.add_service(service.name, service)
    reader = Reader.manufacture("reader-1", b"test:reader", owner=service.name, location=dock)
    world.add_reader(reader.name, reader)
    service.own(reader.id)
    client = Client("shipper")
    world.add_client(client.name, client)
    tag = create_tag(world, dock, "pallet-9")
    certificate = issue_certificate(vendor, reader.keypair.public, 0, 0, 10**6, network.node("node-0"))
    p = Pipeline(world, pki, network, vendor, reader, certificate, service, client, tag)
    p.seal(15)
    return p


@pytest.fixture
def observed(pipeline) -> tuple[Pipeline, bytes, Readout, Evidence]:
    """One honest observation at t=20, sealed at t=30."""
    n = provision_n(pipeline.service, pipeline.tag.id, [pipeline.client])
    readout, evidence = pipeline.observe(20, n, b"received intact")
    pipeline.seal(30)
    return pipeline, n, readout, evidence
