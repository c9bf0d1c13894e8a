import imaplib

import pytest
from hypothesis import settings

from greenproxy.cache import ShardedCache
from greenproxy.imap import BackgroundLoop, ImapProxy, MockImapServer, make_fixture

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")

MESSAGES = {
    1: b"Subject: one\r\n\r\nfirst body\r\n",
    2: b"Subject: two\r\n\r\n" + b"x" * 5000,
    7: b"Subject: seven\r\n\r\n\x00binary\xff\r\n",
}


@pytest.fixture(scope="session")
def bg():
    with BackgroundLoop() as loop:
        yield loop


class Harness:
    """A mock upstream plus a proxy in front of it, both on the test loop."""

    def __init__(self, bg, fixture=None, capacity=1 << 20, **mock_kw):
        self.bg = bg
        self.upstream = MockImapServer(fixture or make_fixture(MESSAGES), **mock_kw)
        self.up_addr = bg.run(self.upstream.start())
        self.cache = ShardedCache.single(capacity)
        self.proxy = ImapProxy(self.cache, self.up_addr)
        self.addr = bg.run(self.proxy.start())
        self.clients = []

    def client(self, user="alice", password="secret", mailbox="INBOX"):
        c = imaplib.IMAP4(*self.addr, timeout=10)
        self.clients.append(c)
        if user is not None:
            assert c.login(user, password)[0] == "OK"
            if mailbox is not None:
                assert c.select(mailbox)[0] == "OK"
        return c

    def close(self):
        for c in self.clients:
            try:
                c.shutdown()
            except OSError:
                pass
        self.bg.run(self.proxy.close())
        self.bg.run(self.upstream.close())


@pytest.fixture
def harness(bg):
    made = []

    def make(**kw):
        h = Harness(bg, **kw)
        made.append(h)
        return h

    yield make
    for h in made:
        h.close()


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
