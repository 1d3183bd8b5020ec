"""Payload segmentation from bit-flip statistics (a simplified READ variant)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .candata import IdStream
from .errors import TooFewFrames
from .layout import Signal, SignalClass, SignalLayout, payload_bits, read_layouts, write_layouts

__all__ = [
    "BitFlipProfile",
    "Thresholds",
    "bit_flip_profile",
    "derive_layout",
    "segment_stream",
    "read_layouts",
    "write_layouts",
]


@dataclass(frozen=True)
class BitFlipProfile:
    id: int
    rates: np.ndarray  # shape (64,)
    n_pairs: int
    dlc: int

    def counts(self) -> np.ndarray:
        return np.rint(self.rates * self.n_pairs)


@dataclass(frozen=True)
class Thresholds:
    counter_lsb_min: float = 0.95
    ratio_lo: float = 0.4
    ratio_hi: float = 0.6
    min_counter_bits: int = 3
    checksum_lo: float = 0.4
    checksum_hi: float = 0.6
    drop_ratio: float = 0.5
    drop_margin: float = 0.1


def bit_flip_profile(stream: IdStream) -> BitFlipProfile:
    n = len(stream)
    if n < 2:
        raise TooFewFrames(f"id {stream.id:03X}: need >= 2 frames, got {n}")
    bits = payload_bits(stream.payloads())
    flips = np.count_nonzero(bits[1:] != bits[:-1], axis=0)
    dlc = max(f.dlc for f in stream.frames)
    return BitFlipProfile(stream.id, flips / (n - 1), n - 1, dlc)


def _halves(profile: BitFlipProfile, hi_bit: int, lo_bit: int, th: Thresholds) -> bool:
    """True if the flip count at ``hi_bit`` is about half the count at ``lo_bit``.

    Low counts are quantized (an 8-bit counter's MSB flips 3 or 4 times in 512
    frames), so a +-1 flip slack is accepted next to the ratio band.
    """
    c_hi, c_lo = profile.counts()[[hi_bit, lo_bit]]
    if c_hi <= 0 or c_lo <= 0:
        return False
    ratio = c_hi / c_lo
    return th.ratio_lo <= ratio <= th.ratio_hi or abs(2 * c_hi - c_lo) <= 2


def _counter_tail(profile: BitFlipProfile, a: int, b: int, th: Thresholds) -> int:
    """Length of the counter ending at bit ``b-1`` (its LSB), or 0."""
    if profile.rates[b - 1] < th.counter_lsb_min:
        return 0
    length = 1
    while b - length - 1 >= a and _halves(profile, b - length - 1, b - length, th):
        length += 1
    return length if length >= th.min_counter_bits else 0


def _split_physical(r: np.ndarray, a: int, b: int, th: Thresholds) -> list[Signal]:
    out = []
    cut = a
    for j in range(a + 1, b):
        if r[j] < th.drop_ratio * r[j - 1] and r[j - 1] - r[j] > th.drop_margin:
            out.append(Signal(cut, j - cut, SignalClass.PHYSICAL))
            cut = j
    out.append(Signal(cut, b - cut, SignalClass.PHYSICAL))
    return out


def _classify_run(profile: BitFlipProfile, a: int, b: int, th: Thresholds) -> list[Signal]:
    """Segment a run of bits that all flip at least once."""
    out: list[Signal] = []
    phys_end = b
    j = b
    while j > a:
        k = _counter_tail(profile, a, j, th)
        if k:
            if phys_end > j:
                out.extend(_split_physical(profile.rates, j, phys_end, th)[::-1])
            out.append(Signal(j - k, k, SignalClass.COUNTER))
            j -= k
            phys_end = j
        else:
            j -= 1
    if phys_end > a:
        out.extend(_split_physical(profile.rates, a, phys_end, th)[::-1])
    return out[::-1]


def derive_layout(profile: BitFlipProfile, thresholds: Thresholds | None = None) -> SignalLayout:
    """Turn a flip profile into a covering, sorted layout.

    Zero-rate bits become CONSTANT and a trailing byte whose bits all flip
    about half the time is a CHECKSUM. Inside the remaining variable runs a
    COUNTER is an always-flipping LSB whose rates halve bit by bit toward the
    MSB; what is left is PHYSICAL, cut wherever the rate falls sharply from one
    bit to the next (the LSB of one field followed by the MSB of the next).
    """
    th = thresholds or Thresholds()
    r = profile.rates
    n_bits = profile.dlc * 8
    end = n_bits
    tail: list[Signal] = []
    if n_bits >= 8:
        last = r[n_bits - 8 : n_bits]
        if np.all((last >= th.checksum_lo) & (last <= th.checksum_hi)):
            tail.append(Signal(n_bits - 8, 8, SignalClass.CHECKSUM))
            end = n_bits - 8

    signals: list[Signal] = []
    i = 0
    while i < end:
        j = i
        zero = r[i] == 0
        while j < end and (r[j] == 0) == zero:
            j += 1
        if zero:
            signals.append(Signal(i, j - i, SignalClass.CONSTANT))
        else:
            signals.extend(_classify_run(profile, i, j, th))
        i = j
    return SignalLayout(profile.id, tuple(signals + tail))


def segment_stream(stream: IdStream, thresholds: Thresholds | None = None) -> SignalLayout:
    return derive_layout(bit_flip_profile(stream), thresholds)
