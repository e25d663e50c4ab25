"""Newline-delimited JSON framing shared by the environment and model endpoints."""

import json
import socket

from mctsep.exceptions import EnvConnectionError, MalformedMessageError


def parse_endpoint(endpoint):
    """Accept 'host:port', (host, port) or a dict with host/port keys."""
    if isinstance(endpoint, str):
        host, _, port = endpoint.rpartition(":")
        if not host or not port.isdigit():
            raise ValueError(f"endpoint {endpoint!r} is not of the form host:port")
        return host, int(port)
    if isinstance(endpoint, dict) or hasattr(endpoint, "get"):
        return endpoint.get("host"), int(endpoint.get("port"))
    host, port = endpoint
    return host, int(port)


def encode_message(message):
    return (json.dumps(message, sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8")


def send_message(stream, message):
    try:
        stream.write(encode_message(message))
        stream.flush()
    except OSError as e:
        raise EnvConnectionError(f"failed to send message: {e}") from e


def read_message(stream, require_type=True):
    try:
        line = stream.readline()
    except OSError as e:
        raise EnvConnectionError(f"failed to read message: {e}") from e
    if not line:
        raise EnvConnectionError("connection closed by peer")
    try:
        message = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise MalformedMessageError(f"malformed message {line[:200]!r}: {e}") from e
    if not isinstance(message, dict) or (require_type and "type" not in message):
        raise MalformedMessageError(f"message without a type field: {line[:200]!r}")
    return message


class LineConnection:
    """A client socket speaking newline-delimited JSON."""

    def __init__(self, endpoint, timeout=30.0):
        self.address = parse_endpoint(endpoint)
        try:
            self.sock = socket.create_connection(self.address, timeout=timeout)
        except OSError as e:
            raise EnvConnectionError(f"cannot connect to {self.address[0]}:{self.address[1]}: {e}") from e
        self.stream = self.sock.makefile("rwb")

    def request(self, message, require_type=True):
        send_message(self.stream, message)
        return read_message(self.stream, require_type=require_type)

    def close(self):
        try:
            self.stream.close()
        finally:
            self.sock.close()
