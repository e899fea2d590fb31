class ClientError(Exception):
    """Base class for everything this SDK raises on purpose."""


class ValidationError(ClientError):
    """The document or samples failed local validation; nothing was sent."""


class BrokerUnavailable(ClientError):
    """The ingest endpoint could not be reached (after retries)."""


class StreamClosed(ClientError):
    """The stream was already ended with end_stream()."""


class ChannelMismatch(ClientError):
    """Sample matrix shape disagrees with the stream's channel count."""


class ProtocolError(ClientError):
    """The server said something the wire contract does not allow."""


class RequestFailed(ClientError):
    """Query service returned an error document."""

    def __init__(self, status: int, code: str, message: str):
        super().__init__(f"{status} {code}: {message}")
        self.status = status
        self.code = code
        self.message = message


class NotFound(RequestFailed):
    pass


class BadRequest(RequestFailed):
    pass


class Overloaded(RequestFailed):
    pass


def request_error(status: int, code: str, message: str) -> RequestFailed:
    if status == 404 or code == "not_found":
        return NotFound(status, code, message)
    if status == 503 or code in ("overloaded", "store_closed", "store_unreachable"):
        return Overloaded(status, code, message)
    if 400 <= status < 500:
        return BadRequest(status, code, message)
    return RequestFailed(status, code, message)
