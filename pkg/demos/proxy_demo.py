"""
Two devices, one cache
======================

Starts a mock IMAP server and the caching proxy in front of it, then has
a phone and a laptop read the same mailbox. The laptop's reads come out
of the cache; the ledger shows how much traffic the mail server was
spared.
"""

import imaplib

from greenproxy.cache import ShardedCache
from greenproxy.carbon import EnergyIntensity, ServerProfile, offset_requirement
from greenproxy.costmodel import CostParams
from greenproxy.imap import BackgroundLoop, ImapProxy, MockImapServer, workload_fixture
from greenproxy.workload import WorkloadSpec

# a 200-message mailbox for user0 with realistic sizes
spec = WorkloadSpec(num_messages=200, seed=2)
upstream = MockImapServer(workload_fixture(spec))

with BackgroundLoop() as bg:
    up_addr = bg.run(upstream.start())
    # two 4 MB shards on a consistent-hash ring
    proxy = ImapProxy(ShardedCache({"shard-a": 4 << 20, "shard-b": 4 << 20}), up_addr)
    addr = bg.run(proxy.start())
    print("proxy on %s:%d, mail server on %s:%d" % (addr + up_addr))

    devices = {}
    for name in ("phone", "laptop"):
        c = imaplib.IMAP4(*addr)
        c.login("user0", "secret")
        c.select("INBOX")
        devices[name] = c

    # the phone reads the newest 20 messages, then the laptop does the same
    newest = range(spec.num_messages, spec.num_messages - 20, -1)
    for name, c in devices.items():
        before = upstream.fetch_count()
        for uid in newest:
            c.uid("FETCH", str(uid), "(BODY.PEEK[])")
        print(f"{name}: 20 reads, {upstream.fetch_count() - before} reached the mail server")

    for c in devices.values():
        c.logout()
    bg.run(proxy.close())
    bg.run(upstream.close())

led = proxy.ledger
print(f"hits {led.hits}, misses {led.misses}, hit rate {led.hit_rate:.2f}")
print(f"bytes served from cache {led.hit_bytes:,}, from the mail server {led.miss_bytes:,}")

# what the misses cost in server energy, at the yearly per-user profile
profile = ServerProfile(users_served=500, annual_energy_per_user=28.4, annual_carbon_per_user=16.7)
params = CostParams(lambda_=1, T=1, beta=1, c0=0.02, cv=0)
emissions = offset_requirement(led, profile, EnergyIntensity(), params, 50 * 365)
print(f"server energy for this session: {emissions.energy_to_offset_kwh * 1000:.1f} Wh")
