"""Sparse byte-addressable device memory."""

from __future__ import annotations

from ..errors import DeviceFault

PAGE_BITS = 12
PAGE = 1 << PAGE_BITS
_ZERO_PAGE = bytes(PAGE)


class SimMemory:
    """Device memory covering ``[device_base, device_base + device_size)``.

    Pages are materialised on first write; unwritten bytes read as zero.
    """

    def __init__(self, device_base: int, device_size: int):
        if device_base % PAGE or device_size % PAGE:
            raise ValueError("device range must be page aligned")
        self.device_base = device_base
        self.device_size = device_size
        self.end = device_base + device_size
        self.pages: dict[int, bytearray] = {}

    def _check(self, addr: int, n: int) -> None:
        if addr < self.device_base or addr + n > self.end:
            raise DeviceFault(addr)

    def read(self, addr: int, n: int) -> bytes:
        self._check(addr, n)
        out = bytearray()
        while n:
            pn, off = addr >> PAGE_BITS, addr & (PAGE - 1)
            take = min(n, PAGE - off)
            page = self.pages.get(pn)
            out += page[off:off + take] if page is not None else _ZERO_PAGE[:take]
            addr += take
            n -= take
        return bytes(out)

    def write(self, addr: int, data: bytes) -> None:
        self._check(addr, len(data))
        pos = 0
        n = len(data)
        while pos < n:
            pn, off = addr >> PAGE_BITS, addr & (PAGE - 1)
            take = min(n - pos, PAGE - off)
            page = self.pages.get(pn)
            if page is None:
                page = self.pages[pn] = bytearray(PAGE)
            page[off:off + take] = data[pos:pos + take]
            addr += take
            pos += take

    # Aligned scalar accesses never straddle a page, which the interpreter
    # guarantees by faulting on misalignment first.
    def read_int(self, addr: int, width: int) -> int:
        if addr < self.device_base or addr + width > self.end:
            raise DeviceFault(addr)
        page = self.pages.get(addr >> PAGE_BITS)
        if page is None:
            return 0
        off = addr & (PAGE - 1)
        return int.from_bytes(page[off:off + width], "little")

    def write_int(self, addr: int, width: int, value: int) -> None:
        if addr < self.device_base or addr + width > self.end:
            raise DeviceFault(addr)
        pn = addr >> PAGE_BITS
        page = self.pages.get(pn)
        if page is None:
            page = self.pages[pn] = bytearray(PAGE)
        off = addr & (PAGE - 1)
        page[off:off + width] = value.to_bytes(width, "little")

    def clear(self, addr: int, n: int) -> None:
        """Zero ``[addr, addr+n)``, dropping whole pages where possible."""
        self._check(addr, n)
        end = addr + n
        while addr < end:
            pn, off = addr >> PAGE_BITS, addr & (PAGE - 1)
            take = min(end - addr, PAGE - off)
            if take == PAGE:
                self.pages.pop(pn, None)
            elif pn in self.pages:
                self.pages[pn][off:off + take] = bytes(take)
            addr += take

    def copy(self) -> SimMemory:
        m = SimMemory(self.device_base, self.device_size)
        m.pages = {k: bytearray(v) for k, v in self.pages.items()}
        return m

    def _nonzero(self) -> dict[int, bytes]:
        return {k: bytes(v) for k, v in self.pages.items() if any(v)}

    def __eq__(self, other) -> bool:
        if not isinstance(other, SimMemory):
            return NotImplemented
        return (self.device_base, self.device_size) == (other.device_base, other.device_size) \
            and self._nonzero() == other._nonzero()

    __hash__ = None

    def differing_pages(self, other: SimMemory) -> list[int]:
        """Start addresses of pages whose contents differ between the two."""
        keys = set(self.pages) | set(other.pages)
        out = []
        for k in sorted(keys):
            a = self.pages.get(k, _ZERO_PAGE)
            b = other.pages.get(k, _ZERO_PAGE)
            if bytes(a) != bytes(b):
                out.append(k << PAGE_BITS)
        return out

    def equal_outside(self, other: SimMemory, lo: int, hi: int) -> bool:
        """True iff every byte outside ``[lo, hi)`` matches ``other``."""
        for k in set(self.pages) | set(other.pages):
            start = k << PAGE_BITS
            a = bytes(self.pages.get(k, _ZERO_PAGE))
            b = bytes(other.pages.get(k, _ZERO_PAGE))
            if a == b:
                continue
            if start >= lo and start + PAGE <= hi:
                continue
            for i in range(PAGE):
                if a[i] != b[i] and not lo <= start + i < hi:
                    return False
        return True
