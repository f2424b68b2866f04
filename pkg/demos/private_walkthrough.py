"""A private-mode session from start to finish, in one process.

Run: python3 demos/private_walkthrough.py

The client keeps a small state (seeds, V and a Merkle root); the server holds the file.
We write to the file, audit it, damage one cell behind the client's back,
watch the audit fail, and finally rebuild the (undamaged) file from audit
transcripts alone.
"""

import random

from matpor import porcore as pc
from matpor.harness import BitFlip
from matpor.params import derive_params

rng = random.Random(1)
data = bytearray(rng.randbytes(20_000))

params = derive_params(len(data))
client, server = pc.por_init(params, bytes(data), rng)
print(f"file of {len(data)} bytes as a {params.m} x {params.n} matrix mod {params.q}, t={params.t}")
print(f"client state: {len(client.to_bytes())} bytes")

# verified write then read, straddling a Merkle block boundary
pc.write_bytes(client, server, 8180, b"hello, auditor")
data[8180:8194] = b"hello, auditor"
print("read back:", pc.read_bytes(client, server, 8180, 14))

tr = pc.por_audit(client, server, rng)
print(f"honest audit: rho={tr.rho_digest()} accepted={tr.accepted}")

# collect enough honest transcripts to rebuild the file later
e = 4 * params.n + 24 * params.lam
transcripts = [pc.por_audit(client, server, rng) for _ in range(e)]
rebuilt = pc.por_extract(params, transcripts)
print(f"extracted from {e} transcripts: identical={rebuilt == bytes(data)}")

# now one flipped bit in one cell is enough to fail every audit
bad = BitFlip(server, 1, rng=rng)
verdicts = [pc.por_audit(client, bad, rng).accepted for _ in range(20)]
print(f"after flipping a bit at byte {bad.offsets[0]}: {verdicts.count(False)}/20 audits rejected")
