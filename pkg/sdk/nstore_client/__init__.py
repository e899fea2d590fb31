"""Client SDK for the nstore biosignal persistence service.

Build entity documents with the topic classes, stream them (and EEG
sample matrices) with a Sender, read them back with a Requester::

    from nstore_client import DataEntity, ProcessEntity, Sender, Requester

    proc = ProcessEntity("session-1")
    run = DataEntity("run-1").mount("EEG", channels=65, sampling_rate=1000.0)
    run.relate("ProcessData", from_id=proc.id, to_id=run.id)

    with Sender("127.0.0.1:7070") as sender:
        sender.send_entity(proc)
        sender.send_entity(run)
        sender.send_samples(run.id, samples)     # (frames, channels) float64
        sender.end_stream(run.id)

    with Requester("127.0.0.1:7080") as req:
        page = req.joint("Process", "ProcessData", "from")
"""

from nstore_client.documents import (
    ByteRef,
    DataEntity,
    DeviceEntity,
    Entity,
    ParadigmEntity,
    PersonEntity,
    ProcessEntity,
    entity_from_doc,
)
from nstore_client.errors import (
    BadRequest,
    BrokerUnavailable,
    ChannelMismatch,
    ClientError,
    NotFound,
    Overloaded,
    ProtocolError,
    RequestFailed,
    StreamClosed,
    ValidationError,
)
from nstore_client.requester import Requester
from nstore_client.sender import Sender

__version__ = "0.1.0"

__all__ = [
    "BadRequest",
    "ByteRef",
    "BrokerUnavailable",
    "ChannelMismatch",
    "ClientError",
    "DataEntity",
    "DeviceEntity",
    "Entity",
    "NotFound",
    "Overloaded",
    "ParadigmEntity",
    "PersonEntity",
    "ProcessEntity",
    "ProtocolError",
    "RequestFailed",
    "Requester",
    "Sender",
    "StreamClosed",
    "ValidationError",
    "entity_from_doc",
]
