"""Two applications share one manager over a unix socket.

The attacker launches a store kernel aimed 16 MiB below its own buffer,
which is where the victim's partition sits.  The run is repeated with the
manager unprotected to show what sandboxing prevents.

    python demos/two_tenants_over_socket.py
"""

import tempfile
from pathlib import Path

from grdsim.interp import DevAddr, Scalar32
from grdsim.manager import BackgroundServer, Client, Manager, ManagerConfig

KERNELS = Path(__file__).resolve().parent.parent / "scenarios" / "kernels"


def attack(unprotected: bool) -> None:
    with tempfile.TemporaryDirectory() as tmp:
        sock = str(Path(tmp) / "manager.sock")
        with BackgroundServer(Manager(ManagerConfig(unprotected=unprotected)), sock):
            with Client(sock) as victim, Client(sock) as attacker:
                victim.init(16 << 20)
                buf = victim.malloc(4096)
                victim.h2d(buf, b"\xa5" * 4096)

                attacker.init(16 << 20)
                attacker.load_module((KERNELS / "listing1.ptx").read_text())
                dst = attacker.malloc(4096)
                print(f"  victim partition   {victim.base:#x} .. {victim.base + victim.size:#x}")
                print(f"  attacker partition {attacker.base:#x} .. {attacker.base + attacker.size:#x}")
                print(f"  attacker aims at   {(dst - (16 << 20)) % (1 << 64):#x}")
                attacker.launch("kernel", 1, 8, [DevAddr(dst), Scalar32(-(4 << 20))])

                data = victim.d2h(buf, 4096)
                damaged = sum(b != 0xA5 for b in data)
                print(f"  victim buffer: {damaged} of 4096 bytes changed")


print("sandboxed manager")
attack(unprotected=False)
print("unprotected manager")
attack(unprotected=True)
