"""Signal layouts: typed bit-fields inside a CAN payload.

Bits are numbered from the most significant bit of byte 0 (bit 0) to the
least significant bit of byte 7 (bit 63), so a field ``[start, start+length)``
stores its most significant bit at ``start``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CanFedError


class SignalClass(str, enum.Enum):
    CONSTANT = "CONSTANT"
    COUNTER = "COUNTER"
    CHECKSUM = "CHECKSUM"
    PHYSICAL = "PHYSICAL"


@dataclass(frozen=True)
class Signal:
    start_bit: int
    length_bits: int
    kind: SignalClass

    @property
    def end_bit(self) -> int:
        return self.start_bit + self.length_bits

    @property
    def max_value(self) -> int:
        return (1 << self.length_bits) - 1


@dataclass(frozen=True)
class SignalLayout:
    id: int
    signals: tuple[Signal, ...]

    def __post_init__(self):
        prev_end = 0
        for sig in self.signals:
            if sig.length_bits < 1:
                raise CanFedError(f"signal at bit {sig.start_bit} has length < 1")
            if sig.start_bit < prev_end:
                raise CanFedError(f"overlapping or unsorted signal at bit {sig.start_bit}")
            if sig.end_bit > 64:
                raise CanFedError(f"signal at bit {sig.start_bit} exceeds 64 bits")
            prev_end = sig.end_bit

    @property
    def n_bits(self) -> int:
        return self.signals[-1].end_bit if self.signals else 0

    def variable_signals(self) -> list[int]:
        """Indices of signals that carry information (everything but CONSTANT)."""
        return [i for i, s in enumerate(self.signals) if s.kind is not SignalClass.CONSTANT]

    def canonical(self) -> "SignalLayout":
        """Merge adjacent CONSTANT runs so equivalent layouts compare equal."""
        merged: list[Signal] = []
        for sig in self.signals:
            if (
                merged
                and sig.kind is SignalClass.CONSTANT
                and merged[-1].kind is SignalClass.CONSTANT
                and merged[-1].end_bit == sig.start_bit
            ):
                last = merged.pop()
                sig = Signal(last.start_bit, last.length_bits + sig.length_bits, SignalClass.CONSTANT)
            merged.append(sig)
        return SignalLayout(self.id, tuple(merged))


def fill_gaps(can_id: int, signals: Iterable[Signal], n_bits: int) -> SignalLayout:
    """Cover ``[0, n_bits)`` by inserting CONSTANT signals between the given ones."""
    out: list[Signal] = []
    pos = 0
    for sig in sorted(signals, key=lambda s: s.start_bit):
        if sig.start_bit > pos:
            out.append(Signal(pos, sig.start_bit - pos, SignalClass.CONSTANT))
        out.append(sig)
        pos = sig.end_bit
    if pos < n_bits:
        out.append(Signal(pos, n_bits - pos, SignalClass.CONSTANT))
    return SignalLayout(can_id, tuple(out))


def payload_bits(payloads: Sequence[bytes]) -> np.ndarray:
    """Unpack payloads into an ``(n, 64)`` uint8 bit matrix, zero-padded."""
    buf = np.zeros((len(payloads), 8), dtype=np.uint8)
    for i, p in enumerate(payloads):
        buf[i, : len(p)] = np.frombuffer(p, dtype=np.uint8)
    return np.unpackbits(buf, axis=1)


def field_values(bits: np.ndarray, sig: Signal) -> np.ndarray:
    """Unsigned value of ``sig`` for every row of a bit matrix."""
    weights = 1 << np.arange(sig.length_bits - 1, -1, -1, dtype=np.int64)
    return bits[:, sig.start_bit : sig.end_bit].astype(np.int64) @ weights


def get_field(payload: bytes, start_bit: int, length_bits: int) -> int:
    value = int.from_bytes(payload.ljust(8, b"\0"), "big")
    return (value >> (64 - start_bit - length_bits)) & ((1 << length_bits) - 1)


def set_field(payload: bytes, start_bit: int, length_bits: int, field: int) -> bytes:
    n = len(payload)
    value = int.from_bytes(payload.ljust(8, b"\0"), "big")
    shift = 64 - start_bit - length_bits
    mask = ((1 << length_bits) - 1) << shift
    value = (value & ~mask) | ((field << shift) & mask)
    return value.to_bytes(8, "big")[:n]


def format_layouts(layouts: Iterable[SignalLayout]) -> str:
    """One ``id_hex,start_bit,length,class`` line per signal."""
    return "".join(
        f"{lay.id:03X},{s.start_bit},{s.length_bits},{s.kind.value}\n" for lay in layouts for s in lay.signals
    )


def write_layouts(path: Path | str, layouts: Iterable[SignalLayout]) -> None:
    Path(path).write_text(format_layouts(layouts), encoding="utf-8")


def read_layouts(path: Path | str) -> dict[int, SignalLayout]:
    by_id: dict[int, list[Signal]] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise CanFedError(f"{path}:{lineno}: expected id_hex,start_bit,length,class")
        try:
            can_id = int(parts[0], 16)
            sig = Signal(int(parts[1]), int(parts[2]), SignalClass(parts[3].strip().upper()))
        except ValueError as exc:
            raise CanFedError(f"{path}:{lineno}: {exc}") from None
        by_id.setdefault(can_id, []).append(sig)
    return {k: SignalLayout(k, tuple(sorted(v, key=lambda s: s.start_bit))) for k, v in by_id.items()}
