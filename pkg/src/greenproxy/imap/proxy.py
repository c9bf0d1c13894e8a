"""
The caching IMAP proxy.

Each client connection gets its own upstream connection. Commands are
relayed byte-for-byte, except UID FETCH of whole messages, which is served
from the shared cache when possible. Only the message payload is cached;
FETCH responses for hits are rebuilt with the session's own sequence
numbers.
"""

from __future__ import annotations

import asyncio
import enum
import itertools
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Optional

from ..cache import CacheKey, ShardedCache
from ..ledger import TrafficLedger
from .protocol import (
    CRLF,
    ImapCommand,
    ProtocolError,
    format_fetch_response,
    format_uid_set,
    is_tagged,
    literal_size,
    message_item,
    parse_command,
    parse_fetch_response,
    read_unit,
    search_uids,
    tagged_status,
    untagged_number,
)

logger = logging.getLogger(__name__)

CONTINUE = b"+ Ready for literal data\r\n"
CACHE_SECTION = "BODY[]"  # BODY[] and RFC822 carry the same bytes


class Phase(str, enum.Enum):
    NOT_AUTHENTICATED = "NotAuthenticated"
    AUTHENTICATED = "Authenticated"
    SELECTED = "Selected"
    LOGGED_OUT = "LoggedOut"


class UpstreamLost(ConnectionError):
    pass


def parse_hostport(text: str, default_port: int = 143) -> tuple:
    host, sep, port = text.rpartition(":")
    if not sep:
        return text, default_port
    return host, int(port)


class UpstreamConnection:
    """One connection to the upstream server, with byte accounting."""

    def __init__(self, reader, writer, ledger: TrafficLedger, address: tuple):
        self.reader = reader
        self.writer = writer
        self.ledger = ledger
        self.address = address
        self.alive = True

    @classmethod
    async def open(cls, address: tuple, ledger: TrafficLedger, timeout: float = 10.0):
        reader, writer = await asyncio.wait_for(
            asyncio.open_connection(*address, limit=1 << 20), timeout)
        conn = cls(reader, writer, ledger, address)
        greeting = await conn.read()
        return conn, greeting

    async def send(self, data: bytes) -> None:
        if not self.alive:
            raise UpstreamLost("upstream connection is closed")
        try:
            self.writer.write(data)
            await self.writer.drain()
        except (ConnectionError, OSError) as exc:
            self.alive = False
            raise UpstreamLost(str(exc)) from exc
        self.ledger.add(bytes_to_upstream=len(data))

    async def read(self) -> bytes:
        try:
            unit = await read_unit(self.reader)
        except (ConnectionError, OSError) as exc:
            self.alive = False
            raise UpstreamLost(str(exc)) from exc
        self.ledger.add(bytes_from_upstream=len(unit))
        return unit

    def close(self) -> None:
        self.alive = False
        self.writer.close()


@dataclass
class SessionState:
    phase: Phase = Phase.NOT_AUTHENTICATED
    account: Optional[str] = None
    mailbox: Optional[str] = None
    upstream: Optional[UpstreamConnection] = None
    # uid -> sequence number for the selected mailbox, as far as known
    seq_of: dict = field(default_factory=dict)

    def select(self, mailbox: Optional[str]) -> None:
        self.seq_of = {}
        if mailbox is None:
            self.mailbox = None
            if self.phase is Phase.SELECTED:
                self.phase = Phase.AUTHENTICATED
        else:
            self.mailbox = mailbox
            self.phase = Phase.SELECTED

    def expunge(self, seq: int) -> None:
        self.seq_of = {u: (s - 1 if s > seq else s) for u, s in self.seq_of.items() if s != seq}


class ImapProxy:
    """
    Listens for IMAP clients and proxies them to an upstream server.

    Parameters
    ----------
    cache : ShardedCache
        Shared message cache.
    upstream : tuple
        Default ``(host, port)`` of the upstream server.
    upstreams_by_domain : dict, optional
        ``{"example.com": (host, port)}``; chosen from the LOGIN user's
        domain part.
    """

    def __init__(self, cache: ShardedCache, upstream: tuple, upstreams_by_domain: Optional[dict] = None,
                 ledger: Optional[TrafficLedger] = None, connect_timeout: float = 10.0):
        self.cache = cache
        self.upstream = tuple(upstream)
        self.upstreams_by_domain = {k.lower(): tuple(v) for k, v in (upstreams_by_domain or {}).items()}
        self.ledger = ledger if ledger is not None else TrafficLedger()
        self.connect_timeout = connect_timeout
        self.session_ledgers: list = []
        self.active_sessions = 0
        self._server = None
        self.address: Optional[tuple] = None
        self._tags = itertools.count(1)

    def upstream_for(self, user: Optional[str]) -> tuple:
        if user and "@" in user:
            return self.upstreams_by_domain.get(user.rpartition("@")[2].lower(), self.upstream)
        return self.upstream

    def internal_tag(self) -> str:
        return f"gp{next(self._tags)}"

    async def start(self, host: str = "127.0.0.1", port: int = 0) -> tuple:
        self._server = await asyncio.start_server(self._handle, host, port, limit=1 << 20)
        self.address = tuple(self._server.sockets[0].getsockname()[:2])
        return self.address

    async def close(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()

    async def _handle(self, reader, writer):
        await proxy_session(reader, writer, self)

    def snapshot(self) -> dict:
        return {
            "timestamp": time.time(),
            "ledger": self.ledger.to_dict(),
            "cache": self.cache.snapshot(),
            "sessions": [l.to_dict() for l in self.session_ledgers],
            "active_sessions": self.active_sessions,
        }

    def write_snapshot(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.snapshot(), fh, indent=2)


async def proxy_session(reader, writer, proxy: ImapProxy) -> TrafficLedger:
    """Serve one client connection; returns that session's ledger."""
    session = ProxySession(proxy, reader, writer)
    return await session.run()


class ProxySession:
    def __init__(self, proxy: ImapProxy, reader, writer):
        self.proxy = proxy
        self.reader = reader
        self.writer = writer
        self.ledger = proxy.ledger.child()
        self.state = SessionState()
        # replayed to re-establish the upstream after a failed FETCH;
        # lives only as long as this session
        self._login_raw: Optional[bytes] = None

    # -- client side ---------------------------------------------------

    async def to_client(self, data: bytes) -> None:
        self.writer.write(data)
        await self.writer.drain()
        self.ledger.add(bytes_to_client=len(data))

    async def read_client_command(self) -> Optional[bytes]:
        buf = bytearray()
        while True:
            line = await self.reader.readline()
            if not line:
                return None
            buf += line
            lit = literal_size(line)
            if lit is None:
                break
            if not lit[1]:
                await self.to_client(CONTINUE)
            buf += await self.reader.readexactly(lit[0])
        self.ledger.add(bytes_from_client=len(buf))
        return bytes(buf)

    # -- upstream side -------------------------------------------------

    async def connect(self, address: tuple) -> bytes:
        if self.state.upstream is not None:
            self.state.upstream.close()
        conn, greeting = await UpstreamConnection.open(address, self.ledger, self.proxy.connect_timeout)
        self.state.upstream = conn
        return greeting

    async def forward(self, raw: bytes) -> Optional[bytes]:
        """
        Send a complete client command upstream, pausing for the server's
        continuation before each synchronising literal. Returns the
        server's final response if it refused a literal, else None.
        """
        up = self.state.upstream
        pos = 0
        while True:
            end = raw.find(b"\r\n", pos)
            if end < 0:
                await up.send(raw[pos:])
                return None
            line = raw[pos:end + 2]
            lit = literal_size(line)
            if lit is None:
                await up.send(raw[pos:])
                return None
            await up.send(line)
            if not lit[1]:
                reply = await up.read()
                if not reply.startswith(b"+"):
                    return reply
            await up.send(raw[end + 2:end + 2 + lit[0]])
            pos = end + 2 + lit[0]

    def observe(self, unit: bytes) -> None:
        """Track sequence numbers from untagged upstream responses."""
        num = untagged_number(unit)
        if num is None:
            return
        n, kind = num
        if kind == "EXPUNGE":
            self.state.expunge(n)
        elif kind == "FETCH":
            parsed = parse_fetch_response(unit)
            if parsed and isinstance(parsed[1].get("UID"), int):
                self.state.seq_of[parsed[1]["UID"]] = parsed[0]

    async def relay(self, tag: str, on_unit=None) -> bytes:
        """Relay upstream responses to the client until ``tag`` completes."""
        up = self.state.upstream
        while True:
            unit = await up.read()
            if unit.startswith(b"+"):
                # server wants more from the client (AUTHENTICATE, IDLE...)
                await self.to_client(unit)
                more = await self.read_client_command()
                if more is None:
                    raise ConnectionError("client went away")
                await up.send(more)
                continue
            self.observe(unit)
            if on_unit is not None:
                on_unit(unit)
            await self.to_client(unit)
            if is_tagged(unit, tag):
                return unit

    async def passthrough(self, cmd: ImapCommand) -> bytes:
        self.ledger.add(requests_to_upstream=1)
        refused = await self.forward(cmd.raw)
        if refused is not None:
            await self.to_client(refused)
            return refused
        return await self.relay(cmd.tag)

    async def _internal(self, line: bytes) -> str:
        """Run one command upstream without relaying anything; returns its status."""
        tag = self.proxy.internal_tag()
        self.ledger.add(internal_requests=1)
        _, _, rest = line.partition(b" ")
        await self.forward(tag.encode() + b" " + rest)
        while True:
            unit = await self.state.upstream.read()
            if is_tagged(unit, tag):
                return tagged_status(unit)

    async def restore_upstream(self) -> bool:
        """
        Reconnect after the upstream dropped, replaying this session's LOGIN
        and SELECT so the client can carry on. False if that fails.
        """
        st = self.state
        ok = False
        try:
            await self.connect(st.upstream.address)
            ok = self._login_raw is None or await self._internal(self._login_raw) == "OK"
            if ok and st.mailbox is not None:
                box = st.mailbox.replace("\\", "\\\\").replace('"', '\\"')
                ok = await self._internal(f'x SELECT "{box}"\r\n'.encode()) == "OK"
        except (OSError, asyncio.TimeoutError, ConnectionError) as exc:
            logger.warning("could not re-establish upstream: %s", exc)
        if not ok:
            # a half-restored session would misbehave; let the next command end it
            st.upstream.close()
        st.seq_of = {}
        return ok

    async def refresh_seq_map(self) -> None:
        """Learn uid -> sequence number for the whole mailbox (no FETCH)."""
        up = self.state.upstream
        tag = self.proxy.internal_tag()
        self.ledger.add(internal_requests=1)
        await up.send(f"{tag} UID SEARCH ALL\r\n".encode())
        uids = []
        while True:
            unit = await up.read()
            if is_tagged(unit, tag):
                break
            found = search_uids(unit)
            if found is not None:
                uids.extend(found)
            else:
                self.observe(unit)
                await self.to_client(unit)
        self.state.seq_of = {u: i for i, u in enumerate(sorted(uids), start=1)}

    # -- commands ------------------------------------------------------

    async def bad(self, tag: str, text: str) -> None:
        await self.to_client(f"{tag} BAD {text}\r\n".encode())

    async def dispatch(self, cmd: ImapCommand) -> bool:
        """Handle one command; False ends the session."""
        st = self.state
        if cmd.verb == "LOGOUT":
            await self.passthrough(cmd)
            st.phase = Phase.LOGGED_OUT
            return False
        if cmd.verb == "LOGIN":
            if st.phase is not Phase.NOT_AUTHENTICATED:
                await self.bad(cmd.tag, "already authenticated")
                return True
            target = self.proxy.upstream_for(cmd.args["user"])
            if target != st.upstream.address:
                await self.connect(target)
            reply = await self.passthrough(cmd)
            if tagged_status(reply) == "OK":
                st.phase = Phase.AUTHENTICATED
                st.account = cmd.args["user"]
                self._login_raw = cmd.raw
            return True
        if cmd.verb in ("SELECT", "LIST") and st.phase is Phase.NOT_AUTHENTICATED:
            await self.bad(cmd.tag, "not authenticated")
            return True
        if cmd.verb == "SELECT":
            reply = await self.passthrough(cmd)
            st.select(cmd.args["mailbox"] if tagged_status(reply) == "OK" else None)
            return True
        if cmd.verb == "FETCH":
            if st.phase is not Phase.SELECTED:
                await self.bad(cmd.tag, "no mailbox selected")
                return True
            await handle_fetch(self, cmd)
            return True

        reply = await self.passthrough(cmd)
        status = tagged_status(reply)
        if cmd.name == "AUTHENTICATE" and status == "OK":
            # the account name is not visible; stay uncached for safety
            st.phase = Phase.AUTHENTICATED
        elif cmd.name in ("CLOSE", "UNSELECT") and status == "OK":
            st.select(None)
        if cmd.is_write and st.account and st.mailbox:
            self.proxy.cache.invalidate(st.account, st.mailbox)
        return True

    async def run(self) -> TrafficLedger:
        self.proxy.active_sessions += 1
        try:
            try:
                greeting = await self.connect(self.proxy.upstream)
            except (OSError, asyncio.TimeoutError, ConnectionError) as exc:
                logger.warning("upstream %s unavailable: %s", self.proxy.upstream, exc)
                await self.to_client(b"* BYE upstream server unavailable\r\n")
                return self.ledger
            await self.to_client(greeting)
            while True:
                raw = await self.read_client_command()
                if raw is None:
                    break
                try:
                    cmd = parse_command(raw)
                except ProtocolError as exc:
                    await self.to_client(exc.response())
                    continue
                try:
                    if not await self.dispatch(cmd):
                        break
                except UpstreamLost as exc:
                    logger.warning("upstream lost: %s", exc)
                    await self.to_client(b"* BYE upstream connection lost\r\n")
                    break
        except (ConnectionError, asyncio.IncompleteReadError) as exc:
            logger.debug("client connection ended: %s", exc)
        finally:
            if self.state.upstream is not None:
                self.state.upstream.close()
            self.writer.close()
            self.proxy.active_sessions -= 1
            self.proxy.session_ledgers.append(self.ledger)
        return self.ledger


async def handle_fetch(session: ProxySession, cmd: ImapCommand) -> None:
    """
    Serve a FETCH, using the cache for UID FETCH of whole messages.

    Cached messages are answered locally; the rest are fetched upstream in
    one command, relayed, and stored. A cache failure only costs a
    passthrough; an upstream failure mid-fetch gets a tagged NO and no
    partial entry is ever stored.
    """
    st = session.state
    proxy = session.proxy
    ledger = session.ledger
    if not cmd.cacheable or st.account is None:
        await session.passthrough(cmd)
        return

    uids = cmd.args["uids"]
    item = message_item(cmd.args["items"])
    keys = {u: CacheKey(st.account, st.mailbox, u, CACHE_SECTION) for u in uids}

    hits = {}
    try:
        present = [u for u in uids if proxy.cache.peek(keys[u]) is not None]
        if any(u not in st.seq_of for u in present):
            await session.refresh_seq_map()
        for u in present:
            if u not in st.seq_of:
                # gone upstream: drop the stale copy
                proxy.cache.node_for(keys[u]).delete(keys[u])
        for u in uids:
            if u in present and u not in st.seq_of:
                continue
            payload = proxy.cache.get(keys[u])
            if payload is not None:
                hits[u] = payload
    except UpstreamLost:
        raise
    except Exception:
        logger.exception("cache lookup failed; falling back to upstream")
        hits = {}

    for u in sorted(hits):
        payload = hits[u]
        await session.to_client(format_fetch_response(st.seq_of[u], u, item, payload))
        ledger.add(hits=1, hit_bytes=len(payload))

    missed = [u for u in uids if u not in hits]
    if not missed:
        await session.to_client(f"{cmd.tag} OK UID FETCH completed\r\n".encode())
        return

    if hits:
        raw = f"{cmd.tag} UID FETCH {format_uid_set(missed)} ".encode() + cmd.args["items_raw"] + CRLF
    else:
        raw = cmd.raw
    wanted = set(missed)

    def fill(unit: bytes) -> None:
        parsed = parse_fetch_response(unit)
        if not parsed:
            return
        uid = parsed[1].get("UID")
        payload = parsed[1].get(item)
        if uid not in wanted or not isinstance(payload, bytes):
            return
        wanted.discard(uid)
        ledger.add(misses=1, miss_bytes=len(payload))
        try:
            proxy.cache.set(keys[uid], payload)
        except Exception as exc:
            logger.info("not caching uid %s: %s", uid, exc)

    ledger.add(requests_to_upstream=1)
    try:
        await session.forward(raw)
        await session.relay(cmd.tag, on_unit=fill)
    except UpstreamLost as exc:
        logger.warning("upstream failed during FETCH: %s", exc)
        await session.to_client(f"{cmd.tag} NO upstream failure during FETCH\r\n".encode())
        await session.restore_upstream()
