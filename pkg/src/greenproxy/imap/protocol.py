"""
The slice of IMAP4rev1 syntax the proxy needs to understand.

Only LOGIN, SELECT/EXAMINE, LIST, FETCH/UID FETCH, NOOP and LOGOUT are
parsed structurally. Every other command is OPAQUE and is relayed
byte-for-byte.
"""

from __future__ import annotations

import asyncio
import re
from dataclasses import dataclass, field
from typing import Optional

MAX_LINE = 64 * 1024
MAX_UID_SET = 10_000
CRLF = b"\r\n"

VERBS = ("LOGIN", "SELECT", "LIST", "FETCH", "NOOP", "LOGOUT", "OPAQUE")
# commands that may change message content or membership
WRITE_COMMANDS = frozenset({"STORE", "EXPUNGE", "APPEND", "COPY", "MOVE", "UID STORE", "UID EXPUNGE", "UID MOVE"})
CACHEABLE_ITEMS = ({"BODY[]"}, {"BODY.PEEK[]"}, {"RFC822"})
KNOWN_NAMES = frozenset({"LOGIN", "SELECT", "EXAMINE", "LIST", "FETCH", "NOOP", "LOGOUT", "UID", "CAPABILITY",
                         "SEARCH", "STATUS", "CLOSE", "UNSELECT", "AUTHENTICATE", "STARTTLS", "IDLE"}) | WRITE_COMMANDS

_LITERAL_AT_END = re.compile(rb"\{(\d+)(\+?)\}\r\n$")
_LITERAL_START = re.compile(rb"\{(\d+)\+?\}\r\n")
_TAG_RE = re.compile(r'^[^\s(){%*"\\+]+$')
_NAME_RE = re.compile(r"^[A-Za-z][A-Za-z0-9.]*$")


class ProtocolError(Exception):
    """A client command that must be answered with a tagged BAD."""

    def __init__(self, message: str, tag: str = "*"):
        super().__init__(message)
        self.tag = tag

    def response(self) -> bytes:
        return f"{self.tag} BAD {self}\r\n".encode()


@dataclass
class ImapCommand:
    tag: str
    verb: str
    args: dict = field(default_factory=dict)
    uid: bool = False
    name: str = ""  # upper-cased command name as sent, e.g. "UID STORE"
    raw: bytes = b""

    @property
    def is_write(self) -> bool:
        return self.name in WRITE_COMMANDS

    @property
    def cacheable(self) -> bool:
        """A UID FETCH of whole messages only."""
        if self.verb != "FETCH" or not self.uid:
            return False
        items = set(self.args["items"]) - {"UID"}
        return items in CACHEABLE_ITEMS and self.args["uids"] is not None


# --------------------------------------------------------------------------
# tokenising


def tokenize(data: bytes) -> list:
    """
    Split a command or response body into atoms, quoted strings, literals
    and parenthesised lists (as nested Python lists). Quoted strings and
    literals come back as ``bytes``; atoms as ``str``.
    """
    tokens, pos = _tokenize(data, 0, top=True)
    return tokens


def _tokenize(data: bytes, pos: int, top: bool):
    out = []
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c in (b" ", b"\r", b"\n"):
            pos += 1
        elif c == b"(":
            inner, pos = _tokenize(data, pos + 1, top=False)
            out.append(inner)
        elif c == b")":
            if top:
                raise ProtocolError("unbalanced ')'")
            return out, pos + 1
        elif c == b'"':
            buf = bytearray()
            pos += 1
            while True:
                if pos >= n:
                    raise ProtocolError("unterminated quoted string")
                ch = data[pos:pos + 1]
                if ch == b"\\":
                    buf += data[pos + 1:pos + 2]
                    pos += 2
                elif ch == b'"':
                    pos += 1
                    break
                else:
                    buf += ch
                    pos += 1
            out.append(bytes(buf))
        elif c == b"{":
            m = _LITERAL_START.match(data, pos)
            if not m:
                raise ProtocolError("malformed literal")
            size = int(m.group(1))
            start = m.end()
            if start + size > n:
                raise ProtocolError("truncated literal")
            out.append(data[start:start + size])
            pos = start + size
        else:
            start = pos
            depth = 0
            while pos < n:
                ch = data[pos:pos + 1]
                if ch == b"[":
                    depth += 1
                elif ch == b"]":
                    depth -= 1
                elif depth <= 0 and ch in (b" ", b"(", b")", b"\r", b"\n"):
                    break
                pos += 1
            out.append(data[start:pos].decode("utf-8", "surrogateescape"))
    if not top:
        raise ProtocolError("unbalanced '('")
    return out, pos


def astring(tok) -> str:
    if isinstance(tok, bytes):
        return tok.decode("utf-8", "surrogateescape")
    if isinstance(tok, list):
        raise ProtocolError("expected a string, got a list")
    return tok


def parse_uid_set(text: str) -> Optional[list]:
    """
    Expand a sequence set into explicit numbers, or return None when it
    cannot be expanded safely (``*`` or more than MAX_UID_SET entries).
    """
    out = []
    for part in text.split(","):
        if not part:
            raise ProtocolError(f"bad sequence set {text!r}")
        if "*" in part:
            return None
        lo, _, hi = part.partition(":")
        if not lo.isdigit() or (hi and not hi.isdigit()):
            raise ProtocolError(f"bad sequence set {text!r}")
        a, b = int(lo), int(hi or lo)
        if a < 1 or b < 1:
            raise ProtocolError(f"bad sequence set {text!r}")
        a, b = min(a, b), max(a, b)
        if len(out) + (b - a + 1) > MAX_UID_SET:
            return None
        out.extend(range(a, b + 1))
    return sorted(set(out))


def format_uid_set(uids) -> str:
    return ",".join(str(u) for u in uids)


def _fetch_items(toks) -> list:
    if len(toks) == 1 and isinstance(toks[0], list):
        toks = toks[0]
    items = []
    for t in toks:
        if isinstance(t, list):
            raise ProtocolError("unsupported nested FETCH item list")
        items.append(astring(t).upper())
    if not items:
        raise ProtocolError("FETCH needs data items")
    return items


def parse_command(line: bytes) -> ImapCommand:
    """
    Parse one complete client command (including any literal data it
    carries). Unknown commands become OPAQUE with ``raw`` kept intact.
    """
    if len(line) > MAX_LINE:
        raise ProtocolError("command line too long")
    if not line.endswith(CRLF):
        raise ProtocolError("command must end with CRLF")
    head, sep, rest = line[:-2].partition(b" ")
    tag = head.decode("utf-8", "surrogateescape")
    if not tag or not _TAG_RE.match(tag):
        raise ProtocolError("missing or invalid tag")
    if not sep or not rest.strip():
        raise ProtocolError("missing command", tag)

    name_b, _, rest = rest.partition(b" ")
    name = name_b.decode("ascii", "replace").upper()
    if not _NAME_RE.match(name):
        # "FETCH 1 BODY[]": the tag was left out, so there is nothing to echo
        raise ProtocolError("missing tag or invalid command name", "*" if tag.upper() in KNOWN_NAMES else tag)
    uid = False
    if name == "UID":
        sub, _, rest = rest.partition(b" ")
        sub = sub.decode("ascii", "replace").upper()
        if not _NAME_RE.match(sub):
            raise ProtocolError("UID needs a command", tag)
        name = f"UID {sub}"
        uid = True

    try:
        toks = tokenize(rest + CRLF) if rest else []
    except ProtocolError as exc:
        raise ProtocolError(str(exc), tag) from None

    def need(n):
        if len(toks) != n:
            raise ProtocolError(f"{name} expects {n} argument(s)", tag)

    if name == "LOGIN":
        need(2)
        return ImapCommand(tag, "LOGIN", {"user": astring(toks[0]), "password": astring(toks[1])},
                           name=name, raw=line)
    if name in ("SELECT", "EXAMINE"):
        need(1)
        return ImapCommand(tag, "SELECT", {"mailbox": astring(toks[0]), "readonly": name == "EXAMINE"},
                           name=name, raw=line)
    if name == "LIST":
        need(2)
        return ImapCommand(tag, "LIST", {"reference": astring(toks[0]), "pattern": astring(toks[1])},
                           name=name, raw=line)
    if name in ("FETCH", "UID FETCH"):
        if len(toks) < 2 or not isinstance(toks[0], str):
            raise ProtocolError(f"{name} expects a sequence set and data items", tag)
        try:
            items = _fetch_items(toks[1:])
            uids = parse_uid_set(toks[0])
        except ProtocolError as exc:
            raise ProtocolError(str(exc), tag) from None
        items_raw = rest.split(b" ", 1)[1] if b" " in rest else b""
        return ImapCommand(tag, "FETCH", {"set": toks[0], "uids": uids, "items": items,
                                          "items_raw": items_raw},
                           uid=uid, name=name, raw=line)
    if name in ("NOOP", "LOGOUT"):
        need(0)
        return ImapCommand(tag, name, name=name, raw=line)
    return ImapCommand(tag, "OPAQUE", {"raw": line}, uid=uid, name=name, raw=line)


# --------------------------------------------------------------------------
# wire helpers


def literal_size(line: bytes) -> Optional[tuple]:
    """``(size, non_synchronizing)`` if the line ends with a literal marker."""
    m = _LITERAL_AT_END.search(line)
    if not m:
        return None
    return int(m.group(1)), bool(m.group(2))


async def read_unit(reader: asyncio.StreamReader, limit: int = 64 * 1024 * 1024) -> bytes:
    """
    Read one response (or command) including any literals it embeds.
    Raises ``ConnectionError`` on EOF, including EOF inside a literal.
    """
    buf = bytearray()
    while True:
        line = await reader.readline()
        if not line or not line.endswith(b"\n"):
            raise ConnectionError("connection closed")
        buf += line
        lit = literal_size(line)
        if lit is None:
            return bytes(buf)
        if len(buf) + lit[0] > limit:
            raise ConnectionError("literal exceeds limit")
        try:
            buf += await reader.readexactly(lit[0])
        except asyncio.IncompleteReadError:
            raise ConnectionError("connection closed inside literal") from None


def is_tagged(unit: bytes, tag: str) -> bool:
    return unit.startswith(tag.encode() + b" ")


def tagged_status(unit: bytes) -> str:
    """'OK', 'NO' or 'BAD' for a tagged response line."""
    parts = unit.split(b" ", 2)
    return parts[1].decode("ascii", "replace").upper() if len(parts) > 1 else ""


_UNTAGGED_NUM = re.compile(rb"^\* (\d+) (EXISTS|EXPUNGE|FETCH)\b", re.IGNORECASE)


def untagged_number(unit: bytes) -> Optional[tuple]:
    """``(n, KIND)`` for ``* n EXISTS|EXPUNGE|FETCH`` responses."""
    m = _UNTAGGED_NUM.match(unit)
    if not m:
        return None
    return int(m.group(1)), m.group(2).decode().upper()


def parse_fetch_response(unit: bytes) -> Optional[tuple]:
    """
    Decode ``* seq FETCH (...)`` into ``(seq, {ITEM: value})``. Message
    bodies come back as bytes. Returns None for anything else.
    """
    m = _UNTAGGED_NUM.match(unit)
    if m is None or m.group(2).upper() != b"FETCH":
        return None
    toks = tokenize(unit[m.end():])
    if not toks or not isinstance(toks[0], list):
        return None
    seq = int(m.group(1))
    pairs = toks[0]
    items = {}
    for i in range(0, len(pairs) - 1, 2):
        key = pairs[i]
        if isinstance(key, str):
            items[key.upper()] = pairs[i + 1]
    if "UID" in items and isinstance(items["UID"], str) and items["UID"].isdigit():
        items["UID"] = int(items["UID"])
    return seq, items


def format_fetch_response(seq: int, uid: int, item: str, payload: bytes) -> bytes:
    return b"* %d FETCH (UID %d %s {%d}\r\n" % (seq, uid, item.encode(), len(payload)) + payload + b")\r\n"


def message_item(items: list) -> str:
    """The whole-message item a cacheable FETCH asked for."""
    return "RFC822" if "RFC822" in items else "BODY[]"


def search_uids(unit: bytes) -> Optional[list]:
    """UIDs from a ``* SEARCH n n n`` response."""
    if not unit.upper().startswith(b"* SEARCH"):
        return None
    return [int(t) for t in unit[8:].split() if t.isdigit()]
