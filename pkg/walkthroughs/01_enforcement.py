"""A client and a server behind the switch, trusted and then not.

Run: python3 walkthroughs/01_enforcement.py
"""

from opcgate.harness.certs import make_identity
from opcgate.harness.scenarios import Testbed


def show(label, result):
    print(f"{label:<34} {result.outcome.value:<18} phase={result.phase_reached.value} "
          f"{result.duration_ms:.2f} ms")


bed = Testbed(drop_mode="rst")
print("thumbprints:")
print("  client", bed.client_identity.thumbprint.hex())
print("  server", bed.server_identity.thumbprint.hex())

show("empty table", bed.handshake())

bed.trust(bed.client_identity, bed.server_identity)
show("both trusted", bed.handshake())

show("unknown client certificate", bed.handshake(identity=make_identity("visitor")))

bed.distrust(bed.server_identity)
show("server removed from table", bed.handshake())

print("\nlast verdicts at the switch:")
for v in bed.switch.verdicts[-4:]:
    print(" ", v.as_dict())

print("\nsilent drop mode instead of resets:")
quiet = Testbed(drop_mode="silent", timeout=1.0)
show("empty table, silent", quiet.handshake())
