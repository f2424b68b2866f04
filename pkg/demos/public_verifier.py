"""Public verification: anyone holding the signed manifest can audit.

Run: python3 demos/public_verifier.py

The data owner keeps the secret control rows; the manifest carries only
group elements g**U and a signature.  A verifier with nothing but the
manifest checks the server's answer in the exponent.
"""

import random

from matpor import pubpor as pub
from matpor.group import Ristretto255
from matpor.params import derive_params

rng = random.Random(2)
G = Ristretto255()
data = rng.randbytes(3_000)
params = derive_params(len(data), mode="public")

writer, manifest, server = pub.pub_init(params, data, G, rng)
blob = manifest.to_bytes()
print(f"{params.m} x {params.n} matrix over the ristretto255 scalar field; manifest {len(blob)} bytes")

# the verifier only ever sees the serialized manifest
seen = pub.PublicKeyMaterial.from_bytes(blob)
print("signature valid:", seen.verify_signature())
print("audit accepted:", pub.pub_audit(seen, server, params, G, rng).accepted)

# the owner edits the file and publishes a new manifest
manifest = pub.pub_write_bytes(writer, server, 10, b"new contents")
print(f"after a write (manifest seq {manifest.seq}):",
      "new manifest", pub.pub_audit(manifest, server, params, G, rng).accepted,
      "| old manifest", pub.pub_audit(seen, server, params, G, rng).accepted)

# a server that shifts one coordinate of y is caught
W = pub.fetch_w(manifest, server, params, G)
rho = 12345
y = server.audit(rho)
y[0] = (y[0] + 1) % G.order
print("forged response accepted:", pub.group_check(manifest, G, W, rho, y))
