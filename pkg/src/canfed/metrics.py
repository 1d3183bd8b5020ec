"""Detection scores and communication-overhead accounting."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .attacks import CLEAN
from .errors import CanFedError, ShapeMismatch

MIB = 2**20
UPDATE_SIZE = 372_893
T_SUB = 0.180
T_PUB = 0.411
RAW_PACKET_BYTES = 102


@dataclass(frozen=True)
class KindScore:
    windows: int
    flagged: int
    sequences: int
    sequences_detected: int

    @property
    def dr(self) -> float | None:
        return self.flagged / self.windows if self.windows else None

    @property
    def sequence_dr(self) -> float | None:
        return self.sequences_detected / self.sequences if self.sequences else None


@dataclass(frozen=True)
class DetectionReport:
    tp: int
    fp: int
    tn: int
    fn: int
    sequences: int
    sequences_detected: int
    per_kind: Mapping[str, KindScore] = field(default_factory=dict)

    @property
    def dr(self) -> float | None:
        """Window-level detection rate; None when there were no attack windows."""
        pos = self.tp + self.fn
        return self.tp / pos if pos else None

    @property
    def fpr(self) -> float | None:
        neg = self.fp + self.tn
        return self.fp / neg if neg else None

    @property
    def sequence_dr(self) -> float | None:
        return self.sequences_detected / self.sequences if self.sequences else None

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def attack_runs(labels: Sequence[str]) -> list[tuple[int, int, str]]:
    """Maximal runs of consecutive attack windows as ``(start, stop, kind)``."""
    runs = []
    start = None
    for i, lab in enumerate([*labels, CLEAN]):
        if lab != CLEAN and start is None:
            start = i
        elif lab == CLEAN and start is not None:
            runs.append((start, i, labels[start]))
            start = None
    return runs


def detection_report(predictions: Sequence[bool], labels: Sequence[str]) -> DetectionReport:
    """Score window verdicts; a sequence counts as detected if any of its windows is flagged."""
    pred = np.asarray(predictions, dtype=bool)
    labels = list(labels)
    if pred.shape != (len(labels),):
        raise ShapeMismatch(f"{pred.size} predictions for {len(labels)} labels")
    attack = np.array([lab != CLEAN for lab in labels], dtype=bool)
    runs = attack_runs(labels)
    kinds: dict[str, list[int]] = {}
    for lab, p in zip(labels, pred):
        if lab != CLEAN:
            k = kinds.setdefault(lab, [0, 0, 0, 0])
            k[0] += 1
            k[1] += int(p)
    for start, stop, kind in runs:
        k = kinds.setdefault(kind, [0, 0, 0, 0])
        k[2] += 1
        k[3] += int(pred[start:stop].any())
    return DetectionReport(
        tp=int(np.sum(pred & attack)),
        fp=int(np.sum(pred & ~attack)),
        tn=int(np.sum(~pred & ~attack)),
        fn=int(np.sum(~pred & attack)),
        sequences=len(runs),
        sequences_detected=sum(int(pred[a:b].any()) for a, b, _ in runs),
        per_kind={k: KindScore(*v) for k, v in sorted(kinds.items())},
    )


# -- communication overhead ---------------------------------------------------


@dataclass(frozen=True)
class OverheadReport:
    rounds: int
    update_size: int
    dl_time: float
    ul_time: float
    dl_mib: float
    ul_mib: float
    delta_mib: float
    t_sub: float
    t_pub: float
    raw_packets: int
    raw_packet_bytes: int


def overhead_report(
    rounds: int,
    update_size: int = UPDATE_SIZE,
    t_sub: float = T_SUB,
    t_pub: float = T_PUB,
    raw_packets: int = 0,
    raw_packet_bytes: int = RAW_PACKET_BYTES,
) -> OverheadReport:
    """Cost of a federated run next to uploading the raw packets once.

    Downloads include the initial broadcast, so they move one model more than
    uploads; both transfer times are charged per round.
    """
    if min(rounds, update_size, t_sub, t_pub, raw_packets, raw_packet_bytes) < 0:
        raise CanFedError("overhead inputs must be non-negative")
    dl = (rounds + 1) * update_size / MIB
    ul = rounds * update_size / MIB
    centralized = (raw_packets * raw_packet_bytes + update_size) / MIB
    return OverheadReport(
        rounds, update_size, rounds * t_sub, rounds * t_pub, dl, ul, dl + ul - centralized,
        t_sub, t_pub, raw_packets, raw_packet_bytes,
    )


@dataclass(frozen=True)
class ByteAccount:
    dl: int
    ul: int
    retransmitted: int
    expected_dl: int
    expected_ul: int

    @property
    def matches_formula(self) -> bool:
        return self.dl == self.expected_dl and self.ul == self.expected_ul


def bytes_accounting(history) -> dict[int, ByteAccount]:
    """Measured per-vehicle model traffic next to ``(R+1)·|global|`` and ``R·|update|``."""
    r = history.n_rounds
    return {
        vid: ByteAccount(
            t.dl_bytes, t.ul_bytes, t.retransmitted_bytes,
            (r + 1) * history.global_size, r * history.update_size,
        )
        for vid, t in sorted(history.traffic.items())
    }


# -- tables ---------------------------------------------------------------------


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def to_csv(rows: Iterable[Mapping[str, object]], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_cell(row.get(c)) for c in columns])
    return buf.getvalue()


def to_text_table(rows: Iterable[Mapping[str, object]], columns: Sequence[str]) -> str:
    body = [[_cell(row.get(c)) for c in columns] for row in rows]
    widths = [max(len(c), *(len(r[i]) for r in body)) if body else len(c) for i, c in enumerate(columns)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in body]
    return "\n".join(lines) + "\n"


DETECTION_COLUMNS = ("id", "mode", "windows", "tp", "fp", "tn", "fn", "dr", "fpr", "sequences", "sequence_dr")
KIND_COLUMNS = ("id", "mode", "kind", "windows", "flagged", "dr", "sequences", "sequence_dr")
OVERHEAD_COLUMNS = ("id", "rounds", "dl_time_s", "ul_time_s", "dl_mib", "ul_mib", "delta_mib")


def detection_row(can_id: int, mode: str, rep: DetectionReport) -> dict:
    return {
        "id": f"{can_id:03X}", "mode": mode, "windows": rep.total,
        "tp": rep.tp, "fp": rep.fp, "tn": rep.tn, "fn": rep.fn,
        "dr": rep.dr, "fpr": rep.fpr, "sequences": rep.sequences, "sequence_dr": rep.sequence_dr,
    }


def kind_rows(can_id: int, mode: str, rep: DetectionReport) -> list[dict]:
    return [
        {"id": f"{can_id:03X}", "mode": mode, "kind": kind, "windows": s.windows, "flagged": s.flagged,
         "dr": s.dr, "sequences": s.sequences, "sequence_dr": s.sequence_dr}
        for kind, s in rep.per_kind.items()
    ]


def overhead_row(can_id: int, rep: OverheadReport) -> dict:
    return {
        "id": f"{can_id:03X}", "rounds": rep.rounds,
        "dl_time_s": round(rep.dl_time, 2), "ul_time_s": round(rep.ul_time, 2),
        "dl_mib": round(rep.dl_mib, 2), "ul_mib": round(rep.ul_mib, 2), "delta_mib": round(rep.delta_mib, 2),
    }


def overhead_dict(rep: OverheadReport) -> dict:
    return asdict(rep)
