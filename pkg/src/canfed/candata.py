"""CAN traffic: log parsing, synthetic generation, per-ID windowing and partitioning."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence, TextIO

import numpy as np

from .errors import DlcMismatch, EmptySpec, InvalidId, MalformedLine, ZeroVehicles
from .layout import Signal, SignalClass, SignalLayout, fill_gaps

WINDOW_LEN = 40
MAX_ID = 0x7FF


@dataclass(frozen=True)
class CanFrame:
    timestamp: float
    id: int
    dlc: int
    payload: bytes

    def __post_init__(self):
        if not 0 <= self.id <= MAX_ID:
            raise InvalidId(f"CAN id {self.id:#x} outside 11-bit range")
        if not 0 <= self.dlc <= 8:
            raise DlcMismatch(f"dlc {self.dlc} outside 0..8")
        if len(self.payload) != self.dlc:
            raise DlcMismatch(f"payload has {len(self.payload)} bytes, dlc says {self.dlc}")


@dataclass(frozen=True)
class IdStream:
    id: int
    frames: tuple[CanFrame, ...]

    def __len__(self) -> int:
        return len(self.frames)

    def payloads(self) -> list[bytes]:
        return [f.payload for f in self.frames]


@dataclass(frozen=True)
class Window:
    id: int
    start_index: int
    frames: tuple[CanFrame, ...]
    label: str = "clean"


@dataclass(frozen=True)
class Partition:
    vehicle_id: int
    frames: tuple[CanFrame, ...]


# -- log format -------------------------------------------------------------


def parse_line(line: str, lineno: int = 0) -> CanFrame:
    parts = line.strip().split(",")
    if len(parts) != 4:
        raise MalformedLine(f"line {lineno}: expected 4 fields, got {len(parts)}")
    ts_s, id_s, dlc_s, data_s = (p.strip() for p in parts)
    try:
        ts = float(ts_s)
    except ValueError:
        raise MalformedLine(f"line {lineno}: bad timestamp {ts_s!r}") from None
    if ts < 0:
        raise MalformedLine(f"line {lineno}: negative timestamp")
    try:
        can_id = int(id_s, 16)
    except ValueError:
        raise InvalidId(f"line {lineno}: non-hex id {id_s!r}") from None
    if can_id > MAX_ID:
        raise InvalidId(f"line {lineno}: id {id_s} exceeds 0x7FF")
    try:
        dlc = int(dlc_s)
        payload = bytes.fromhex(data_s)
    except ValueError:
        raise MalformedLine(f"line {lineno}: bad dlc or payload") from None
    if len(payload) != dlc:
        raise DlcMismatch(f"line {lineno}: payload has {len(payload)} bytes, dlc={dlc}")
    return CanFrame(ts, can_id, dlc, payload)


def parse_log(stream: TextIO | Iterable[str]) -> list[CanFrame]:
    """Parse ``timestamp,id_hex,dlc,payload_hex`` lines; ``#`` lines and blanks are skipped."""
    frames = []
    last_ts = 0.0
    for lineno, line in enumerate(stream, 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        frame = parse_line(stripped, lineno)
        if frame.timestamp < last_ts:
            raise MalformedLine(f"line {lineno}: timestamp goes backwards")
        last_ts = frame.timestamp
        frames.append(frame)
    return frames


def format_frame(frame: CanFrame) -> str:
    return f"{frame.timestamp:.6f},{frame.id:03X},{frame.dlc},{frame.payload.hex().upper()}"


def serialize_log(frames: Iterable[CanFrame]) -> str:
    return "".join(format_frame(f) + "\n" for f in frames)


def read_log(path: Path | str) -> list[CanFrame]:
    with open(path, encoding="utf-8") as fh:
        return parse_log(fh)


def group_by_id(frames: Iterable[CanFrame]) -> dict[int, IdStream]:
    buckets: dict[int, list[CanFrame]] = {}
    for f in frames:
        buckets.setdefault(f.id, []).append(f)
    return {k: IdStream(k, tuple(v)) for k, v in sorted(buckets.items())}


# -- synthetic traffic ------------------------------------------------------


@dataclass
class PlantedSignal:
    """A signal plus the dynamics used to drive it.

    ``step`` bounds the per-frame move of a PHYSICAL random walk, ``value``
    fixes a CONSTANT (or the initial value of other kinds) and ``algo`` picks
    the CHECKSUM function (``sum`` or ``crc8``). A PHYSICAL signal with a
    ``period`` (in frames) follows a sine wave across most of its range
    instead, with ``step`` as the bound on uniform integer noise.
    """

    start_bit: int
    length_bits: int
    kind: SignalClass
    step: int = 1
    value: int | None = None
    algo: str = "sum"
    period: float = 0.0

    def __post_init__(self):
        self.kind = SignalClass(self.kind)

    def as_signal(self) -> Signal:
        return Signal(self.start_bit, self.length_bits, self.kind)


@dataclass
class IdTraffic:
    id: int
    period: float
    signals: list[PlantedSignal]
    dlc: int = 8
    phase: float = 0.0
    jitter: float = 0.0

    def layout(self) -> SignalLayout:
        return fill_gaps(self.id, [s.as_signal() for s in self.signals], self.dlc * 8)


@dataclass
class TrafficSpec:
    ids: list[IdTraffic]
    duration: float
    seed: int = 0


def crc8_j1850(data: bytes) -> int:
    crc = 0xFF
    for byte in data:
        crc ^= byte
        for _ in range(8):
            crc = ((crc << 1) ^ 0x1D) & 0xFF if crc & 0x80 else (crc << 1) & 0xFF
    return crc ^ 0xFF


def _walk(rng: np.random.Generator, n: int, start: int, step: int, hi: int) -> np.ndarray:
    steps = rng.integers(-step, step + 1, size=n)
    out = np.empty(n, dtype=np.int64)
    v = start
    for i in range(n):
        out[i] = v
        v += steps[i]
        if v < 0:
            v = -v
        elif v > hi:
            v = 2 * hi - v
    return out


def _wave(rng: np.random.Generator, n: int, period: float, noise: int, hi: int) -> np.ndarray:
    phase = rng.uniform(0, 2 * np.pi)
    clean = hi * (0.5 + 0.45 * np.sin(2 * np.pi * np.arange(n) / period + phase))
    jitter = rng.integers(-noise, noise + 1, size=n)
    return np.clip(np.rint(clean) + jitter, 0, hi).astype(np.int64)


def _id_frames(spec: IdTraffic, duration: float, seed: int) -> list[CanFrame]:
    if any(s.start_bit + s.length_bits > spec.dlc * 8 for s in spec.signals):
        raise EmptySpec(f"id {spec.id:03X}: planted signal runs past dlc={spec.dlc}")
    rng = np.random.default_rng([seed, spec.id])
    n = int(duration / spec.period + 1e-9)
    word = np.zeros(n, dtype=np.uint64)
    checksum: PlantedSignal | None = None
    for sig in spec.signals:
        hi = (1 << sig.length_bits) - 1
        if sig.kind is SignalClass.CHECKSUM:
            checksum = sig
            continue
        if sig.kind is SignalClass.CONSTANT:
            vals = np.full(n, sig.value if sig.value is not None else int(rng.integers(0, hi + 1)))
        elif sig.kind is SignalClass.COUNTER:
            start = sig.value if sig.value is not None else int(rng.integers(0, hi + 1))
            vals = (start + np.arange(n)) & hi
        elif sig.period > 0:
            vals = _wave(rng, n, sig.period, sig.step, hi)
        else:
            start = sig.value if sig.value is not None else (hi + 1) // 2
            vals = _walk(rng, n, start, sig.step, hi)
        shift = np.uint64(64 - sig.start_bit - sig.length_bits)
        word |= vals.astype(np.uint64) << shift
    t = spec.phase + np.arange(n) * spec.period
    if spec.jitter:
        t = t + rng.uniform(-0.5, 0.5, size=n) * min(spec.jitter, spec.period * 0.9)
    t = np.maximum(np.round(t, 6), 0.0)
    t = np.maximum.accumulate(t)
    raw = word.astype(">u8").tobytes()
    frames = []
    for i in range(n):
        payload = raw[8 * i : 8 * i + spec.dlc]
        if checksum is not None:
            pos = checksum.start_bit // 8
            rest = payload[:pos] + payload[pos + 1 :]
            c = crc8_j1850(rest) if checksum.algo == "crc8" else sum(rest) & 0xFF
            payload = payload[:pos] + bytes([c]) + payload[pos + 1 :]
        frames.append(CanFrame(float(t[i]), spec.id, spec.dlc, payload))
    return frames


def synthesize_traffic(spec: TrafficSpec) -> list[CanFrame]:
    """Generate a deterministic multi-ID log from planted layouts and dynamics."""
    if not spec.ids:
        raise EmptySpec("traffic spec has no CAN ids")
    merged: list[CanFrame] = []
    for id_spec in spec.ids:
        merged.extend(_id_frames(id_spec, spec.duration, spec.seed))
    merged.sort(key=lambda f: (f.timestamp, f.id))
    return merged


def random_id_traffic(
    rng: np.random.Generator,
    can_id: int,
    period: float = 0.01,
    checksum_prob: float = 0.5,
) -> IdTraffic:
    """Random planted layout over an 8-byte payload, built to be identifiable from flip rates."""
    checksum = rng.random() < checksum_prob
    limit = 56 if checksum else 64
    signals: list[PlantedSignal] = []
    pos = 0
    while pos < limit:
        room = limit - pos
        kind = rng.choice(["gap", "counter", "physical"], p=[0.3, 0.25, 0.45])
        if kind == "counter" and room >= 3:
            length = int(rng.integers(3, min(8, room) + 1))
            signals.append(PlantedSignal(pos, length, SignalClass.COUNTER))
        elif kind == "physical" and room >= 4:
            length = int(rng.integers(4, min(10, room) + 1))
            step = max(1, round((1 << length) / 23))
            signals.append(PlantedSignal(pos, length, SignalClass.PHYSICAL, step=step))
        else:
            length = int(rng.integers(1, min(8, room) + 1))
            signals.append(PlantedSignal(pos, length, SignalClass.CONSTANT))
        pos += length
    if checksum:
        signals.append(PlantedSignal(56, 8, SignalClass.CHECKSUM, algo="crc8"))
    return IdTraffic(can_id, period, signals)


# -- windows and partitions -------------------------------------------------


def window_starts(n: int, stride: int = 1) -> range:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    return range(0, max(0, n - WINDOW_LEN + 1), stride)


def windows(stream: IdStream, stride: int = 1, labels: Sequence[str] | None = None) -> list[Window]:
    """Consecutive 40-frame windows; a window is labeled by its first attacked frame, if any."""
    out = []
    for s in window_starts(len(stream), stride):
        label = "clean"
        if labels is not None:
            label = next((lab for lab in labels[s : s + WINDOW_LEN] if lab != "clean"), "clean")
        out.append(Window(stream.id, s, stream.frames[s : s + WINDOW_LEN], label))
    return out


def partition_sizes(n: int, vehicles: int) -> list[int]:
    if vehicles < 1:
        raise ZeroVehicles("need at least one vehicle")
    base, extra = divmod(n, vehicles)
    return [base + (1 if v < extra else 0) for v in range(vehicles)]


def partition(stream: IdStream, vehicles: int) -> list[Partition]:
    """Contiguous chunks; the remainder goes to the lowest vehicle ids."""
    out = []
    pos = 0
    for v, size in enumerate(partition_sizes(len(stream), vehicles)):
        out.append(Partition(v, stream.frames[pos : pos + size]))
        pos += size
    return out


def split_fractions(n: int, fractions: Sequence[float]) -> list[slice]:
    """Contiguous slices for train/validation/test style splits."""
    bounds = [0]
    acc = 0.0
    for frac in fractions[:-1]:
        acc += frac
        bounds.append(int(round(acc * n)))
    bounds.append(n)
    return [slice(a, b) for a, b in zip(bounds, bounds[1:])]


def iter_frames(streams: Iterable[IdStream]) -> Iterator[CanFrame]:
    for s in streams:
        yield from s.frames
