"""Virtual-block address space: size classes and the 64-bit address codec.

A virtual-block address packs, from the most significant bit down:

    3-bit size class id | [5-bit VM id, VM mode only] | block id | offset

The offset width is fixed by the size class, the block id gets whatever
bits remain.  The (size id, vm id, block id) prefix is the system-wide
unique name of a block (its VBUID); all codec functions here are pure.
"""

from __future__ import annotations

from dataclasses import dataclass

SIZE_ID_BITS = 3
VM_ID_BITS = 5
ADDR_BITS = 64

KB = 1024
MB = 1024 * KB
GB = 1024 * MB
TB = 1024 * GB


class CapacityError(Exception):
    """Request exceeds the largest size class or an exhausted resource."""


class EncodingError(Exception):
    """A field does not fit the bit layout of its size class."""


@dataclass(frozen=True)
class SizeClass:
    size_id: int
    size_bytes: int
    offset_bits: int

    def vbid_bits(self, vm_mode: bool = False) -> int:
        bits = ADDR_BITS - SIZE_ID_BITS - self.offset_bits
        if vm_mode:
            bits -= VM_ID_BITS
        return bits


def _classes() -> tuple[SizeClass, ...]:
    sizes = (4 * KB, 128 * KB, 4 * MB, 128 * MB, 4 * GB, 128 * GB, 4 * TB, 128 * TB)
    return tuple(
        SizeClass(size_id=i, size_bytes=s, offset_bits=s.bit_length() - 1)
        for i, s in enumerate(sizes)
    )


SIZE_CLASSES: tuple[SizeClass, ...] = _classes()
MAX_VB_BYTES = SIZE_CLASSES[-1].size_bytes


def size_class(size_id: int) -> SizeClass:
    if not 0 <= size_id < len(SIZE_CLASSES):
        raise EncodingError(f"size_id {size_id} out of range")
    return SIZE_CLASSES[size_id]


def class_for_request(requested_size: int) -> SizeClass:
    """Smallest size class whose capacity covers the requested byte count."""
    if requested_size < 1:
        raise ValueError(f"requested_size must be >= 1, got {requested_size}")
    for cls in SIZE_CLASSES:
        if cls.size_bytes >= requested_size:
            return cls
    raise CapacityError(f"no size class fits {requested_size} bytes")


@dataclass(frozen=True, order=True)
class Vbuid:
    """System-wide unique block name: size class id, VM id, block id."""

    size_id: int
    vbid: int
    vm_id: int = 0

    @property
    def size_class(self) -> SizeClass:
        return SIZE_CLASSES[self.size_id]

    def __str__(self) -> str:
        if self.vm_id:
            return f"{self.size_id}:{self.vm_id}:{self.vbid}"
        return f"{self.size_id}:{self.vbid}"


def encode(size_id: int, vbid: int, offset: int, vm_id: int = 0,
           vm_mode: bool = False) -> int:
    """Pack fields into a raw 64-bit address; inverse of decode."""
    cls = size_class(size_id)
    if not 0 <= offset < cls.size_bytes:
        raise EncodingError(f"offset {offset:#x} exceeds class {size_id} size")
    vbid_bits = cls.vbid_bits(vm_mode)
    if not 0 <= vbid < (1 << vbid_bits):
        raise EncodingError(f"vbid {vbid} needs more than {vbid_bits} bits")
    if vm_mode:
        if not 0 <= vm_id < (1 << VM_ID_BITS):
            raise EncodingError(f"vm_id {vm_id} needs more than {VM_ID_BITS} bits")
    elif vm_id:
        raise EncodingError("vm_id given but VM mode is off")
    raw = size_id << (ADDR_BITS - SIZE_ID_BITS)
    if vm_mode:
        raw |= vm_id << (ADDR_BITS - SIZE_ID_BITS - VM_ID_BITS)
    raw |= (vbid << cls.offset_bits) | offset
    return raw


def decode(raw: int, vm_mode: bool = False) -> tuple[int, int, int, int]:
    """Split a raw address into (size_id, vm_id, vbid, offset).

    Every 64-bit value decodes; vm_id is 0 when VM mode is off.
    """
    size_id = (raw >> (ADDR_BITS - SIZE_ID_BITS)) & 0x7
    cls = SIZE_CLASSES[size_id]
    offset = raw & (cls.size_bytes - 1)
    body = (raw >> cls.offset_bits) & ((1 << (ADDR_BITS - SIZE_ID_BITS - cls.offset_bits)) - 1)
    if vm_mode:
        vbid_bits = cls.vbid_bits(vm_mode=True)
        vm_id = body >> vbid_bits
        vbid = body & ((1 << vbid_bits) - 1)
    else:
        vm_id = 0
        vbid = body
    return size_id, vm_id, vbid, offset


def decode_vbuid(raw: int, vm_mode: bool = False) -> tuple[Vbuid, int]:
    size_id, vm_id, vbid, offset = decode(raw, vm_mode)
    return Vbuid(size_id, vbid, vm_id), offset


def vb_base(vbuid: Vbuid, vm_mode: bool = False) -> int:
    """Raw address of offset 0 within the block."""
    return encode(vbuid.size_id, vbuid.vbid, 0, vbuid.vm_id, vm_mode)


def parse_vbuid(text: str) -> Vbuid:
    """Parse 'size:vbid' or 'size:vm:vbid' as used in trace files."""
    parts = text.split(":")
    try:
        if len(parts) == 2:
            return Vbuid(int(parts[0]), int(parts[1]))
        if len(parts) == 3:
            return Vbuid(int(parts[0]), int(parts[2]), int(parts[1]))
    except ValueError:
        pass
    raise ValueError(f"bad vbuid spec {text!r}")
