"""Labeled attack injection into per-ID CAN streams.

Five attack kinds are supported: injection of replayed frames, three
masquerade variants that rewrite payloads of existing frames (fuzzing,
replay, seamless ramp toward a field extreme) and drop of a frame run.
Frame labels are ``"clean"`` or the attack kind's name.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .candata import CanFrame, IdStream
from .errors import CanFedError, MissingLayout, NotAPhysicalSignal, OutOfRange
from .layout import SignalClass, SignalLayout, get_field, set_field

CLEAN = "clean"
DEFAULT_LENGTH = 25


class AttackKind(str, enum.Enum):
    INJECT_REPLAY = "INJECT_REPLAY"
    MASQ_FUZZ = "MASQ_FUZZ"
    MASQ_REPLAY = "MASQ_REPLAY"
    MASQ_SEAMLESS = "MASQ_SEAMLESS"
    DROP = "DROP"


@dataclass(frozen=True)
class AttackSpec:
    kind: AttackKind
    id: int
    start_index: int
    length: int = DEFAULT_LENGTH
    target_signal: int | None = None
    seed: int = 0
    # seamless only: "far" (default), "max" or "min"
    direction: str = "far"

    def __post_init__(self):
        object.__setattr__(self, "kind", AttackKind(self.kind))
        if self.length < 1:
            raise OutOfRange("attack length must be >= 1")
        if self.start_index < 0:
            raise OutOfRange("attack start_index must be >= 0")


@dataclass(frozen=True)
class LabeledStream:
    frames: IdStream
    labels: tuple[str, ...]

    def __post_init__(self):
        if len(self.labels) != len(self.frames):
            raise CanFedError("labels and frames differ in length")

    def attacked_indices(self) -> list[int]:
        return [i for i, lab in enumerate(self.labels) if lab != CLEAN]


def _unpack(stream: IdStream | LabeledStream) -> tuple[IdStream, list[str]]:
    if isinstance(stream, LabeledStream):
        return stream.frames, list(stream.labels)
    return stream, [CLEAN] * len(stream)


def _pack(can_id: int, frames: Sequence[CanFrame], labels: Sequence[str]) -> LabeledStream:
    return LabeledStream(IdStream(can_id, tuple(frames)), tuple(labels))


def _check_region(n: int, spec: AttackSpec) -> None:
    if spec.start_index + spec.length > n:
        raise OutOfRange(
            f"{spec.kind.value}: region [{spec.start_index}, {spec.start_index + spec.length}) "
            f"outside stream of {n} frames"
        )


def _check_replay_source(spec: AttackSpec) -> None:
    if spec.start_index < spec.length:
        raise OutOfRange(
            f"{spec.kind.value}: start {spec.start_index} leaves no {spec.length}-frame replay source"
        )


def median_interarrival(frames: Sequence[CanFrame]) -> float:
    if len(frames) < 2:
        return 0.0
    ts = np.fromiter((f.timestamp for f in frames), dtype=float, count=len(frames))
    return float(np.median(np.diff(ts)))


def inject_replay(stream: IdStream | LabeledStream, spec: AttackSpec) -> LabeledStream:
    """Insert ``length`` extra frames replaying the payloads just before ``start_index``.

    Injected frames follow the last genuine frame at half the median
    inter-arrival; later genuine frames are shifted just enough to keep the
    stream time-ordered.
    """
    base, labels = _unpack(stream)
    frames = list(base.frames)
    n, s, L = len(frames), spec.start_index, spec.length
    _check_replay_source(spec)
    if s > n:
        raise OutOfRange(f"INJECT_REPLAY: start {s} beyond stream of {n} frames")
    half = median_interarrival(frames) / 2
    t0 = frames[s - 1].timestamp
    injected = [
        replace(frames[s - L + i], timestamp=round(t0 + (i + 1) * half, 6)) for i in range(L)
    ]
    tail = frames[s:]
    if tail:
        shift = max(0.0, injected[-1].timestamp + half - tail[0].timestamp)
        if shift:
            tail = [replace(f, timestamp=round(f.timestamp + shift, 6)) for f in tail]
    return _pack(
        base.id,
        frames[:s] + injected + tail,
        labels[:s] + [AttackKind.INJECT_REPLAY.value] * L + labels[s:],
    )


def _masquerade(base: IdStream, labels: list[str], spec: AttackSpec, payloads: list[bytes]) -> LabeledStream:
    frames = list(base.frames)
    for i, p in enumerate(payloads):
        k = spec.start_index + i
        frames[k] = replace(frames[k], payload=p)
        labels[k] = spec.kind.value
    return _pack(base.id, frames, labels)


def _require_layout(base: IdStream, layout: SignalLayout | None) -> SignalLayout:
    if layout is None:
        raise MissingLayout(f"no signal layout for id {base.id:03X}")
    return layout


def masquerade_fuzz(
    stream: IdStream | LabeledStream, spec: AttackSpec, layout: SignalLayout | None
) -> LabeledStream:
    """Randomize every payload bit outside CONSTANT signals; timing is untouched."""
    base, labels = _unpack(stream)
    layout = _require_layout(base, layout)
    _check_region(len(base), spec)
    mask = 0
    for sig in layout.signals:
        if sig.kind is not SignalClass.CONSTANT:
            mask |= sig.max_value << (64 - sig.end_bit)
    rng = np.random.default_rng(spec.seed)
    payloads = []
    for i in range(spec.length):
        f = base.frames[spec.start_index + i]
        orig = int.from_bytes(f.payload.ljust(8, b"\0"), "big")
        noise = int.from_bytes(rng.bytes(8), "big")
        word = (orig & ~mask) | (noise & mask)
        payloads.append(word.to_bytes(8, "big")[: f.dlc])
    return _masquerade(base, labels, spec, payloads)


def masquerade_replay(stream: IdStream | LabeledStream, spec: AttackSpec) -> LabeledStream:
    base, labels = _unpack(stream)
    _check_replay_source(spec)
    _check_region(len(base), spec)
    src = spec.start_index - spec.length
    payloads = [base.frames[src + i].payload for i in range(spec.length)]
    return _masquerade(base, labels, spec, payloads)


def seamless_ramp(v0: int, extreme: int, length: int) -> list[int]:
    """Equal steps from ``v0`` to ``extreme`` over ``length`` frames, rounded half up."""
    if length == 1:
        return [extreme]
    return [math.floor(v0 + (extreme - v0) * i / (length - 1) + 0.5) for i in range(length)]


def masquerade_seamless(
    stream: IdStream | LabeledStream, spec: AttackSpec, layout: SignalLayout | None
) -> LabeledStream:
    """Ramp one PHYSICAL/COUNTER signal from its last genuine value to a field extreme."""
    base, labels = _unpack(stream)
    layout = _require_layout(base, layout)
    _check_region(len(base), spec)
    if spec.start_index < 1:
        raise OutOfRange("MASQ_SEAMLESS needs a genuine frame before start_index")
    idx = spec.target_signal
    if idx is None or not 0 <= idx < len(layout.signals):
        raise NotAPhysicalSignal(f"target signal {idx} not in layout of id {base.id:03X}")
    sig = layout.signals[idx]
    if sig.kind not in (SignalClass.PHYSICAL, SignalClass.COUNTER):
        raise NotAPhysicalSignal(f"signal {idx} is {sig.kind.value}")
    v0 = get_field(base.frames[spec.start_index - 1].payload, sig.start_bit, sig.length_bits)
    if spec.direction == "max":
        extreme = sig.max_value
    elif spec.direction == "min":
        extreme = 0
    else:
        extreme = sig.max_value if v0 < (sig.max_value + 1) / 2 else 0
    ramp = seamless_ramp(v0, extreme, spec.length)
    payloads = [
        set_field(base.frames[spec.start_index + i].payload, sig.start_bit, sig.length_bits, v)
        for i, v in enumerate(ramp)
    ]
    return _masquerade(base, labels, spec, payloads)


def drop_attack(stream: IdStream | LabeledStream, spec: AttackSpec) -> LabeledStream:
    """Remove ``length`` consecutive frames; the first frame after the gap carries the label."""
    base, labels = _unpack(stream)
    n, s, L = len(base), spec.start_index, spec.length
    if s + L >= n:
        raise OutOfRange(f"DROP: region [{s}, {s + L}) leaves no frame after the gap in {n} frames")
    frames = list(base.frames[:s]) + list(base.frames[s + L :])
    out_labels = labels[:s] + labels[s + L :]
    out_labels[s] = AttackKind.DROP.value
    return _pack(base.id, frames, out_labels)


def apply_attack(
    stream: IdStream | LabeledStream, spec: AttackSpec, layout: SignalLayout | None = None
) -> LabeledStream:
    kind = spec.kind
    if kind is AttackKind.INJECT_REPLAY:
        return inject_replay(stream, spec)
    if kind is AttackKind.MASQ_FUZZ:
        return masquerade_fuzz(stream, spec, layout)
    if kind is AttackKind.MASQ_REPLAY:
        return masquerade_replay(stream, spec)
    if kind is AttackKind.MASQ_SEAMLESS:
        return masquerade_seamless(stream, spec, layout)
    return drop_attack(stream, spec)


def apply_attacks(
    stream: IdStream, specs: Iterable[AttackSpec], layout: SignalLayout | None = None
) -> LabeledStream:
    """Apply several attacks to one stream.

    Specs index the original stream; they are applied from the last start
    index backwards so insertions and drops never shift a pending region.
    """
    out: IdStream | LabeledStream = stream
    for spec in sorted(specs, key=lambda s: s.start_index, reverse=True):
        out = apply_attack(out, spec, layout)
    if isinstance(out, IdStream):
        out = LabeledStream(out, tuple([CLEAN] * len(out)))
    return out


def plan_attacks(
    n: int,
    can_id: int,
    kinds: Sequence[AttackKind | str],
    per_kind: int,
    seed: int,
    layout: SignalLayout | None = None,
    length: int = DEFAULT_LENGTH,
    gap: int = 80,
) -> list[AttackSpec]:
    """Evenly spaced, non-overlapping attacks of each kind in a stream of ``n`` frames.

    Attacks are separated by at least ``gap`` clean frames so every attacked
    window is distinguishable from its neighbours. Kinds are interleaved in a
    seeded random order.
    """
    rng = np.random.default_rng([seed, can_id])
    order = [AttackKind(k) for k in kinds for _ in range(per_kind)]
    rng.shuffle(order)
    slot = length + gap
    usable = n - 2 * length - gap
    if not order:
        return []
    if usable < slot * len(order):
        raise OutOfRange(f"{len(order)} attacks of {length} frames do not fit in {n} frames")
    spacing = usable // len(order)
    targets = []
    if layout is not None:
        targets = [i for i, s in enumerate(layout.signals) if s.kind is SignalClass.PHYSICAL] or [
            i for i, s in enumerate(layout.signals) if s.kind is SignalClass.COUNTER
        ]
    specs = []
    for j, kind in enumerate(order):
        start = length + gap // 2 + j * spacing + int(rng.integers(0, spacing - slot + 1))
        target = None
        if kind is AttackKind.MASQ_SEAMLESS:
            if not targets:
                raise NotAPhysicalSignal(f"id {can_id:03X} has no PHYSICAL or COUNTER signal")
            target = int(rng.choice(targets))
        specs.append(
            AttackSpec(kind, can_id, start, length, target, seed=int(rng.integers(0, 2**31)))
        )
    return specs


# -- manifest and label files -------------------------------------------------


def format_manifest_line(spec: AttackSpec) -> str:
    line = f"{spec.kind.value},{spec.id:03X},{spec.start_index},{spec.length},{spec.seed}"
    if spec.target_signal is not None:
        line += f",{spec.target_signal}"
    return line


def write_manifest(path: Path | str, specs: Iterable[AttackSpec]) -> None:
    Path(path).write_text("".join(format_manifest_line(s) + "\n" for s in specs), encoding="utf-8")


def read_manifest(path: Path | str) -> list[AttackSpec]:
    specs = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) not in (5, 6):
            raise CanFedError(f"{path}:{lineno}: expected kind,id_hex,start,length,seed[,signal]")
        try:
            specs.append(
                AttackSpec(
                    AttackKind(parts[0].upper()),
                    int(parts[1], 16),
                    int(parts[2]),
                    int(parts[3]),
                    int(parts[5]) if len(parts) == 6 else None,
                    int(parts[4]),
                )
            )
        except ValueError as exc:
            raise CanFedError(f"{path}:{lineno}: {exc}") from None
    return specs


def format_labels(labels: Iterable[str]) -> str:
    return "".join(("0" if lab == CLEAN else lab) + "\n" for lab in labels)


def parse_labels(text: str) -> list[str]:
    return [CLEAN if line.strip() == "0" else line.strip() for line in text.splitlines() if line.strip()]
