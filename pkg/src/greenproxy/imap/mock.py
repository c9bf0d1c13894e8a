"""
A small scriptable IMAP server for tests and demos.

It serves the same command subset the proxy understands, plus CAPABILITY,
SEARCH, STORE, EXPUNGE, APPEND and CLOSE, and counts every command it
receives so tests can assert what reached the upstream side.

Fixture layout::

    {"alice": {"password": "secret",
               "mailboxes": {"INBOX": {1: b"...", 7: b"..."}}}}
"""

from __future__ import annotations

import asyncio
import collections
import logging
import threading
from typing import Optional

from .protocol import (
    CRLF,
    ProtocolError,
    astring,
    literal_size,
    parse_command,
    parse_uid_set,
    tokenize,
)

logger = logging.getLogger(__name__)

GREETING = b"* OK [CAPABILITY IMAP4rev1] mock IMAP ready\r\n"
CONTINUE = b"+ Ready for literal data\r\n"


class MockImapServer:
    """
    Parameters
    ----------
    fixture : dict
        Accounts, passwords and mailbox contents (uid -> message bytes).
    latency : float
        Seconds to sleep before answering each command.
    truncate_uids : iterable of int
        UIDs whose FETCH is cut off half-way through the literal, after
        which the connection is dropped.
    """

    def __init__(self, fixture: dict, latency: float = 0.0, truncate_uids=()):
        self.accounts = {
            user: {
                "password": spec["password"],
                "mailboxes": {name: dict(sorted(msgs.items())) for name, msgs in spec["mailboxes"].items()},
            }
            for user, spec in fixture.items()
        }
        self.latency = latency
        self.truncate_uids = set(truncate_uids)
        self.counts: collections.Counter = collections.Counter()
        self.fetched_uids: collections.Counter = collections.Counter()
        self.connections = 0
        self.deleted: set = set()  # (user, mailbox, uid) flagged \Deleted
        self._server: Optional[asyncio.base_events.Server] = None
        self._lock = threading.Lock()

    @property
    def address(self) -> tuple:
        return self._server.sockets[0].getsockname()[:2]

    async def start(self, host: str = "127.0.0.1", port: int = 0) -> tuple:
        self._server = await asyncio.start_server(self._handle, host, port, limit=1 << 20)
        return self.address

    async def close(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()

    def fetch_count(self) -> int:
        return self.counts["FETCH"] + self.counts["UID FETCH"]

    def _count(self, name: str) -> None:
        with self._lock:
            self.counts[name] += 1

    # ------------------------------------------------------------------

    async def _read_command(self, reader, writer) -> bytes:
        buf = bytearray()
        while True:
            line = await reader.readline()
            if not line:
                raise ConnectionError("client went away")
            buf += line
            lit = literal_size(line)
            if lit is None:
                return bytes(buf)
            if not lit[1]:
                writer.write(CONTINUE)
                await writer.drain()
            buf += await reader.readexactly(lit[0])

    async def _handle(self, reader, writer):
        self.connections += 1
        state = {"user": None, "mailbox": None}
        writer.write(GREETING)
        try:
            await writer.drain()
            while True:
                raw = await self._read_command(reader, writer)
                try:
                    cmd = parse_command(raw)
                except ProtocolError as exc:
                    writer.write(exc.response())
                    await writer.drain()
                    continue
                self._count(cmd.name)
                if self.latency:
                    await asyncio.sleep(self.latency)
                done = await self._dispatch(cmd, state, writer)
                await writer.drain()
                if done:
                    break
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        finally:
            writer.close()

    def _messages(self, state) -> dict:
        return self.accounts[state["user"]]["mailboxes"][state["mailbox"]]

    async def _dispatch(self, cmd, state, writer) -> bool:
        tag = cmd.tag
        w = writer.write
        name = cmd.name

        if name == "CAPABILITY":
            w(b"* CAPABILITY IMAP4rev1\r\n" + f"{tag} OK CAPABILITY completed\r\n".encode())
        elif name == "NOOP":
            w(f"{tag} OK NOOP completed\r\n".encode())
        elif name == "LOGOUT":
            w(b"* BYE mock IMAP logging out\r\n" + f"{tag} OK LOGOUT completed\r\n".encode())
            return True
        elif name == "LOGIN":
            acct = self.accounts.get(cmd.args["user"])
            if acct is None or acct["password"] != cmd.args["password"]:
                w(f"{tag} NO [AUTHENTICATIONFAILED] invalid credentials\r\n".encode())
            else:
                state["user"] = cmd.args["user"]
                w(f"{tag} OK LOGIN completed\r\n".encode())
        elif state["user"] is None:
            w(f"{tag} BAD not authenticated\r\n".encode())
        elif name in ("SELECT", "EXAMINE"):
            box = cmd.args["mailbox"]
            boxes = self.accounts[state["user"]]["mailboxes"]
            if box not in boxes:
                state["mailbox"] = None
                w(f"{tag} NO no such mailbox\r\n".encode())
            else:
                state["mailbox"] = box
                msgs = boxes[box]
                nxt = max(msgs, default=0) + 1
                w(b"* %d EXISTS\r\n* 0 RECENT\r\n" % len(msgs)
                  + b"* OK [UIDVALIDITY 1] UIDs valid\r\n"
                  + b"* OK [UIDNEXT %d] predicted next UID\r\n" % nxt
                  + f"{tag} OK [READ-WRITE] {name} completed\r\n".encode())
        elif name == "LIST":
            for box in self.accounts[state["user"]]["mailboxes"]:
                w(f'* LIST () "/" "{box}"\r\n'.encode())
            w(f"{tag} OK LIST completed\r\n".encode())
        elif name == "APPEND":
            toks = tokenize(cmd.raw.split(b" ", 2)[2])
            box, data = astring(toks[0]), toks[-1]
            boxes = self.accounts[state["user"]]["mailboxes"]
            if box not in boxes or not isinstance(data, bytes):
                w(f"{tag} NO [TRYCREATE] no such mailbox\r\n".encode())
            else:
                msgs = boxes[box]
                msgs[max(msgs, default=0) + 1] = data
                if state["mailbox"] == box:
                    w(b"* %d EXISTS\r\n" % len(msgs))
                w(f"{tag} OK APPEND completed\r\n".encode())
        elif state["mailbox"] is None:
            w(f"{tag} BAD no mailbox selected\r\n".encode())
        elif name in ("FETCH", "UID FETCH"):
            return await self._fetch(cmd, state, writer)
        elif name in ("SEARCH", "UID SEARCH"):
            msgs = self._messages(state)
            nums = list(msgs) if cmd.uid else range(1, len(msgs) + 1)
            w(b"* SEARCH" + b"".join(b" %d" % n for n in nums) + CRLF + f"{tag} OK SEARCH completed\r\n".encode())
        elif name in ("STORE", "UID STORE"):
            toks = tokenize(cmd.raw.split(b" ", 3 if cmd.uid else 2)[-1])
            msgs = self._messages(state)
            uids = list(msgs)
            targets = parse_uid_set(toks[0]) or []
            flags = toks[2] if len(toks) > 2 and isinstance(toks[2], list) else toks[2:]
            if "+FLAGS" in astring(toks[1]).upper() and any(astring(f).upper() == "\\DELETED" for f in flags):
                for n in targets:
                    uid = n if cmd.uid else (uids[n - 1] if n <= len(uids) else None)
                    if uid in msgs:
                        self.deleted.add((state["user"], state["mailbox"], uid))
            w(f"{tag} OK {name} completed\r\n".encode())
        elif name in ("EXPUNGE", "CLOSE"):
            msgs = self._messages(state)
            removed = 0
            for seq, uid in enumerate(list(msgs), start=1):
                if (state["user"], state["mailbox"], uid) in self.deleted:
                    del msgs[uid]
                    self.deleted.discard((state["user"], state["mailbox"], uid))
                    if name == "EXPUNGE":
                        w(b"* %d EXPUNGE\r\n" % (seq - removed))
                    removed += 1
            if name == "CLOSE":
                state["mailbox"] = None
            w(f"{tag} OK {name} completed\r\n".encode())
        else:
            w(f"{tag} BAD unsupported command {name}\r\n".encode())
        return False

    async def _fetch(self, cmd, state, writer) -> bool:
        msgs = self._messages(state)
        uids = list(msgs)
        wanted = parse_uid_set(cmd.args["set"])
        if wanted is None:
            wanted = uids if cmd.uid else list(range(1, len(uids) + 1))
        items = [i.replace("BODY.PEEK[]", "BODY[]") for i in cmd.args["items"]]
        for n in wanted:
            if cmd.uid:
                if n not in msgs:
                    continue
                uid, seq = n, uids.index(n) + 1
            else:
                if n > len(uids):
                    continue
                seq, uid = n, uids[n - 1]
            body = msgs[uid]
            parts = []
            if cmd.uid or "UID" in items:
                parts.append(b"UID %d" % uid)
            for item in items:
                if item in ("BODY[]", "RFC822"):
                    parts.append(item.encode() + b" {%d}\r\n" % len(body) + body)
                elif item == "RFC822.SIZE":
                    parts.append(b"RFC822.SIZE %d" % len(body))
                elif item == "FLAGS":
                    parts.append(b"FLAGS ()")
            self.fetched_uids[uid] += 1
            resp = b"* %d FETCH (" % seq + b" ".join(parts) + b")\r\n"
            if uid in self.truncate_uids:
                writer.write(resp[: len(resp) - len(body) // 2 - 3])
                await writer.drain()
                return True
            writer.write(resp)
        writer.write(f"{cmd.tag} OK {cmd.name} completed\r\n".encode())
        return False


class BackgroundLoop:
    """
    An asyncio event loop on a daemon thread, so blocking clients such as
    ``imaplib`` can talk to servers hosted on it.
    """

    def __init__(self):
        self.loop = asyncio.new_event_loop()
        self.thread = threading.Thread(target=self.loop.run_forever, daemon=True)
        self.thread.start()

    def run(self, coro, timeout: Optional[float] = 30):
        return asyncio.run_coroutine_threadsafe(coro, self.loop).result(timeout)

    def stop(self):
        self.loop.call_soon_threadsafe(self.loop.stop)
        self.thread.join(5)
        self.loop.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def make_fixture(messages: dict, user: str = "alice", password: str = "secret", mailbox: str = "INBOX") -> dict:
    """One-account fixture from ``{uid: payload}``."""
    return {user: {"password": password, "mailboxes": {mailbox: dict(messages)}}}


def workload_fixture(spec, password: str = "secret") -> dict:
    """
    Fixture whose mailboxes mirror a synthetic workload: ``spec.accounts``
    users (``user0``...) with ``spec.num_messages`` messages each, sized
    like the workload's messages.
    """
    import numpy as np

    from ..workload import message_sizes

    rng = np.random.default_rng(spec.seed)
    sizes = message_sizes(spec, rng)
    fixture = {}
    for a in range(spec.accounts):
        msgs = {}
        for uid in range(1, spec.num_messages + 1):
            size = int(sizes[a, uid - 1])
            header = f"Subject: message {uid}\r\n\r\n".encode()
            msgs[uid] = header + b"x" * max(0, size - len(header))
        fixture[f"user{a}"] = {"password": password, "mailboxes": {spec.mailbox: msgs}}
    return fixture
