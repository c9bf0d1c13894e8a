"""IMAP wire handling, the caching proxy, and a mock upstream server."""

from .mock import BackgroundLoop, MockImapServer, make_fixture, workload_fixture
from .protocol import ImapCommand, ProtocolError, parse_command
from .proxy import ImapProxy, Phase, ProxySession, handle_fetch, proxy_session

mock_upstream = MockImapServer

__all__ = [
    "BackgroundLoop", "ImapCommand", "ImapProxy", "MockImapServer", "Phase", "ProtocolError",
    "ProxySession", "handle_fetch", "make_fixture", "mock_upstream", "parse_command",
    "proxy_session", "workload_fixture",
]
