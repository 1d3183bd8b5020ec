"""Per-ID experiment pipeline: split, segment, attack, train, evaluate, report."""

from __future__ import annotations

import json
import logging
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics
from .attacks import (
    CLEAN,
    AttackSpec,
    LabeledStream,
    apply_attacks,
    format_labels,
    format_manifest_line,
    plan_attacks,
    read_manifest,
)
from .autoencoder import (
    ArchConfig,
    DegenerateSignals,
    FeatureNorms,
    ModelWeights,
    Threshold,
    encode_weights,
    feature_matrix,
    fit_norms,
    flag,
    load_weights,
    reconstruction_errors,
    window_tensor,
)
from .candata import (
    WINDOW_LEN,
    IdStream,
    IdTraffic,
    PlantedSignal,
    TrafficSpec,
    group_by_id,
    partition_sizes,
    random_id_traffic,
    read_log,
    serialize_log,
    split_fractions,
    synthesize_traffic,
)
from .config import ExperimentConfig
from .errors import CanFedError
from .federation import LoopbackTransport, TcpTransport, TrainingHistory, VehicleData, run_federation, train_centralized
from .layout import SignalClass, SignalLayout, format_layouts, read_layouts
from .pubsub import FaultSpec, LoopbackNetwork
from .segmentation import segment_stream

log = logging.getLogger(__name__)

C, K, P = SignalClass.CONSTANT, SignalClass.COUNTER, SignalClass.PHYSICAL


# -- output helpers -------------------------------------------------------------


def atomic_write(path: Path, data: str | bytes) -> None:
    """Write via a temporary sibling and rename, so readers never see half a file."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode() if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def id_tag(can_id: int) -> str:
    return f"{can_id:03X}"


# -- data -----------------------------------------------------------------------


def detection_traffic(can_id: int, period: float, frames: int, rng: np.random.Generator) -> IdTraffic:
    """A fixed, learnable layout: two periodic physical signals, a byte counter and constants."""
    signals = [
        PlantedSignal(0, 8, P, step=0, period=float(rng.uniform(60, 120))),
        PlantedSignal(8, 8, C, value=int(rng.integers(0, 256))),
        PlantedSignal(16, 10, P, step=0, period=float(rng.uniform(150, 300))),
        PlantedSignal(26, 6, C, value=int(rng.integers(0, 64))),
        PlantedSignal(32, 32, C, value=int(rng.integers(0, 1 << 32))),
    ]
    return IdTraffic(can_id, period, signals)


def synthetic_spec(cfg: ExperimentConfig) -> TrafficSpec:
    src = cfg.data.synthetic
    rng = np.random.default_rng(cfg.seed)
    ids = []
    for can_id in src.ids:
        if src.profile == "detection":
            ids.append(detection_traffic(can_id, src.period, src.frames, rng))
        elif src.profile == "random":
            ids.append(random_id_traffic(rng, can_id, src.period, src.checksum_prob))
        else:
            raise CanFedError(f"unknown synthetic profile {src.profile!r}")
    return TrafficSpec(ids, duration=src.frames * src.period, seed=cfg.seed)


def load_streams(cfg: ExperimentConfig) -> dict[int, IdStream]:
    if cfg.data.log is not None:
        path = Path(cfg.data.log)
        if not path.is_file():
            raise FileNotFoundError(f"input log not found: {path}")
        frames = read_log(path)
    else:
        frames = synthesize_traffic(synthetic_spec(cfg))
    streams = group_by_id(frames)
    if cfg.ids is None:
        return streams
    missing = [i for i in cfg.ids if i not in streams]
    if missing:
        raise CanFedError(f"selected ids not in data: {', '.join(id_tag(i) for i in missing)}")
    return {i: streams[i] for i in cfg.ids}


@dataclass
class Splits:
    train: IdStream
    validation: IdStream
    test: IdStream


def split_stream(stream: IdStream, fractions: Sequence[float]) -> Splits:
    parts = [IdStream(stream.id, stream.frames[s]) for s in split_fractions(len(stream), fractions)]
    return Splits(*parts)


def resolve_layout(cfg: ExperimentConfig, can_id: int, train: IdStream) -> SignalLayout:
    if cfg.data.layouts is not None:
        src = Path(cfg.data.layouts)
        if not src.exists():
            raise FileNotFoundError(f"layouts not found: {src}")
        layouts = {}
        for f in sorted(src.glob("*.csv")) if src.is_dir() else [src]:
            layouts.update(read_layouts(f))
        if can_id in layouts:
            return layouts[can_id]
    return segment_stream(train)


def attack_seed(cfg: ExperimentConfig, split: str) -> int:
    return cfg.seed * 2 + (1 if split == "test" else 0)


def split_attacks(cfg: ExperimentConfig, stream: IdStream, layout: SignalLayout, split: str) -> list[AttackSpec]:
    a = cfg.attacks
    if split == "test" and a.manifest is not None:
        path = Path(a.manifest)
        if not path.is_file():
            raise FileNotFoundError(f"attack manifest not found: {path}")
        return [s for s in read_manifest(path) if s.id == stream.id]
    per_kind = a.validation_per_kind if split == "validation" else a.test_per_kind
    return plan_attacks(len(stream), stream.id, a.kinds, per_kind, attack_seed(cfg, split), layout, a.length, a.gap)


@dataclass
class IdData:
    id: int
    layout: SignalLayout
    norms: FeatureNorms
    splits: Splits
    validation_attacked: LabeledStream
    test_attacked: LabeledStream
    validation_specs: list[AttackSpec]
    test_specs: list[AttackSpec]


def prepare_id(cfg: ExperimentConfig, stream: IdStream) -> IdData:
    splits = split_stream(stream, cfg.split)
    layout = resolve_layout(cfg, stream.id, splits.train)
    norms = fit_norms(splits.train.frames, layout)
    val_specs = split_attacks(cfg, splits.validation, layout, "validation")
    test_specs = split_attacks(cfg, splits.test, layout, "test")
    return IdData(
        stream.id, layout, norms, splits,
        apply_attacks(splits.validation, val_specs, layout),
        apply_attacks(splits.test, test_specs, layout),
        val_specs, test_specs,
    )


def window_labels(labels: Sequence[str], stride: int = 1) -> list[str]:
    """Label of each window: the kind of its first attacked frame, else clean."""
    n = len(labels)
    out = []
    nxt = [n] * (n + 1)  # index of the next attacked frame at or after i
    for i in range(n - 1, -1, -1):
        nxt[i] = i if labels[i] != CLEAN else nxt[i + 1]
    for s in range(0, max(0, n - WINDOW_LEN + 1), stride):
        j = nxt[s]
        out.append(labels[j] if j < s + WINDOW_LEN else CLEAN)
    return out


def tensor(frames, layout: SignalLayout, norms: FeatureNorms, stride: int) -> np.ndarray:
    return window_tensor(feature_matrix(frames, layout, norms), stride)


def labelled_windows(stream: LabeledStream, layout, norms, stride: int) -> tuple[np.ndarray, list[str]]:
    return tensor(stream.frames.frames, layout, norms, stride), window_labels(stream.labels, stride)


def _chunks(seq: Sequence, vehicles: int) -> list[Sequence]:
    out, pos = [], 0
    for size in partition_sizes(len(seq), vehicles):
        out.append(seq[pos : pos + size])
        pos += size
    return out


def vehicle_data(cfg: ExperimentConfig, data: IdData, vehicles: int) -> list[VehicleData]:
    """Split every data set into contiguous per-vehicle slices."""
    m = cfg.model
    train = _chunks(data.splits.train.frames, vehicles)
    val = _chunks(data.splits.validation.frames, vehicles)
    cal_frames = _chunks(data.validation_attacked.frames.frames, vehicles)
    cal_labels = _chunks(data.validation_attacked.labels, vehicles)
    out = []
    for v in range(vehicles):
        cal = tensor(cal_frames[v], data.layout, data.norms, 1)
        attack = np.array([lab != CLEAN for lab in window_labels(cal_labels[v])], dtype=bool)
        out.append(
            VehicleData(
                tensor(train[v], data.layout, data.norms, m.train_stride),
                tensor(val[v], data.layout, data.norms, 1),
                cal,
                attack,
            )
        )
    return out


def arch_for(cfg: ExperimentConfig, data: IdData) -> ArchConfig:
    m = cfg.model
    return ArchConfig(data.norms.width, m.enc_hidden, m.latent, m.dec_hidden)


def make_transport(cfg: ExperimentConfig, can_id: int):
    t = cfg.transport
    if t.kind == "tcp":
        return TcpTransport(t.address, t.token, t.stall_timeout, timeout=t.timeout, max_retries=t.max_retries)
    net = LoopbackNetwork(
        seed=t.seed + can_id,
        faults=FaultSpec(t.drop, t.dup, t.delay),
        token=t.token,
        timeout=t.timeout,
        max_retries=t.max_retries,
        publish_latency=t.publish_latency,
        receive_latency=t.receive_latency,
        keep_trace=False,
    )
    return LoopbackTransport(net)


def train_mode(cfg: ExperimentConfig, data: IdData, mode: str) -> TrainingHistory:
    arch = arch_for(cfg, data)
    if mode == "centralized":
        fed = cfg.federation_config(vehicles=1, threshold_vehicle=0)
        (pooled,) = vehicle_data(cfg, data, 1)
        return train_centralized(fed, pooled, arch)
    fed = cfg.federation_config()
    return run_federation(fed, vehicle_data(cfg, data, fed.vehicles), arch, make_transport(cfg, data.id))


def evaluate(weights: ModelWeights, threshold: Threshold, data: IdData, stride: int) -> metrics.DetectionReport:
    x, labels = labelled_windows(data.test_attacked, data.layout, data.norms, stride)
    errors = reconstruction_errors(weights, x)
    return metrics.detection_report(flag(errors, threshold), labels)


# -- persisted artefacts ------------------------------------------------------


def model_paths(out: Path, can_id: int, mode: str) -> tuple[Path, Path, Path]:
    stem = f"{id_tag(can_id)}_{mode}"
    return out / "models" / f"{stem}.fcw", out / "models" / f"{stem}.json", out / "history" / f"{stem}.csv"


def history_csv(h: TrainingHistory) -> str:
    v = max((len(r.vehicle_losses) for r in h.rounds), default=0)
    cols = ["round", "global_loss", "stop"] + [f"loss_v{i}" for i in range(v)]
    rows = [
        {"round": r.round, "global_loss": repr(r.global_loss), "stop": int(r.stop),
         **{f"loss_v{i}": repr(x) for i, x in enumerate(r.vehicle_losses)}}
        for r in h.rounds
    ]
    return metrics.to_csv(rows, cols)


def model_meta(cfg: ExperimentConfig, data: IdData, mode: str, h: TrainingHistory) -> dict:
    arch = h.final_weights.arch
    meta = {
        "id": id_tag(data.id),
        "mode": mode,
        "arch": {"input_width": arch.input_width, "enc_hidden": arch.enc_hidden,
                 "latent": arch.latent, "dec_hidden": arch.dec_hidden},
        "norms": {"signals": list(data.norms.signal_indices),
                  "lo": data.norms.lo.tolist(), "hi": data.norms.hi.tolist()},
        "threshold": {"value": h.threshold.value, "source": h.threshold.source},
        "rounds": h.n_rounds,
        "stopped_early": h.stopped_early,
        "update_size": h.update_size,
        "global_size": h.global_size,
        "train_frames": len(data.splits.train),
    }
    if h.traffic:
        meta["traffic"] = {
            str(vid): {"dl": a.dl, "ul": a.ul, "retransmitted": a.retransmitted,
                       "expected_dl": a.expected_dl, "expected_ul": a.expected_ul}
            for vid, a in metrics.bytes_accounting(h).items()
        }
    return meta


def save_model(cfg: ExperimentConfig, data: IdData, mode: str, h: TrainingHistory) -> None:
    wpath, mpath, hpath = model_paths(cfg.out_dir, data.id, mode)
    atomic_write(wpath, encode_weights(h.final_weights.vector))
    atomic_write(hpath, history_csv(h))
    atomic_write(mpath, json.dumps(model_meta(cfg, data, mode, h), indent=2, sort_keys=True) + "\n")


def load_model(cfg: ExperimentConfig, can_id: int, mode: str) -> tuple[ModelWeights, Threshold, dict]:
    wpath, mpath, _ = model_paths(cfg.out_dir, can_id, mode)
    if not wpath.is_file() or not mpath.is_file():
        raise FileNotFoundError(f"no trained {mode} model for id {id_tag(can_id)} under {cfg.out_dir} (run train first)")
    meta = json.loads(mpath.read_text())
    arch = ArchConfig(**meta["arch"])
    th = meta["threshold"]
    return load_weights(wpath, arch), Threshold(th["value"], th["source"]), meta


# -- commands -----------------------------------------------------------------


def _per_id(cfg: ExperimentConfig, fn, streams: dict[int, IdStream]) -> list:
    """Run ``fn(stream)`` for every id; results come back in id order."""
    ids = sorted(streams)
    if cfg.workers == 1:
        return [fn(streams[i]) for i in ids]
    with ThreadPoolExecutor(cfg.workers) as pool:
        return list(pool.map(lambda i: fn(streams[i]), ids))


def _prepared(cfg: ExperimentConfig) -> list[IdData]:
    def prep(stream: IdStream) -> IdData | None:
        try:
            return prepare_id(cfg, stream)
        except DegenerateSignals as exc:
            log.warning("skipping id %s: %s", id_tag(stream.id), exc)
            return None

    return [d for d in _per_id(cfg, prep, load_streams(cfg)) if d is not None]


def cmd_segment(cfg: ExperimentConfig) -> list[Path]:
    streams = load_streams(cfg)
    out = []
    layouts = _per_id(cfg, lambda s: segment_stream(split_stream(s, cfg.split).train), streams)
    for layout in layouts:
        path = cfg.out_dir / "layouts" / f"{id_tag(layout.id)}.csv"
        atomic_write(path, format_layouts([layout]))
        out.append(path)
    return out


def cmd_attack(cfg: ExperimentConfig) -> list[Path]:
    out = []
    manifest = []
    for data in _prepared(cfg):
        for split, stream, specs in (
            ("validation", data.validation_attacked, data.validation_specs),
            ("test", data.test_attacked, data.test_specs),
        ):
            stem = cfg.out_dir / "attacks" / f"{id_tag(data.id)}_{split}"
            atomic_write(stem.with_suffix(".log"), serialize_log(stream.frames.frames))
            atomic_write(stem.with_suffix(".labels"), format_labels(stream.labels))
            manifest += [f"{split},{format_manifest_line(s)}" for s in specs]
            out += [stem.with_suffix(".log"), stem.with_suffix(".labels")]
    path = cfg.out_dir / "attacks" / "manifest.csv"
    atomic_write(path, "".join(line + "\n" for line in manifest))
    return out + [path]


def cmd_train(cfg: ExperimentConfig) -> dict[tuple[int, str], TrainingHistory]:
    prepared = _prepared(cfg)

    def train_all(data: IdData) -> dict:
        res = {}
        for mode in cfg.modes:
            h = train_mode(cfg, data, mode)
            log.info("id %s %s: %d rounds, threshold %.6g", id_tag(data.id), mode, h.n_rounds, h.threshold.value)
            res[(data.id, mode)] = h
        return res

    results: dict = {}
    by_id = {d.id: d for d in prepared}
    for res in _per_id(cfg, train_all, {d.id: d for d in prepared}):
        results.update(res)
    for (can_id, mode), h in sorted(results.items()):
        save_model(cfg, by_id[can_id], mode, h)
    return results


@dataclass
class Evaluation:
    detection: dict[tuple[int, str], metrics.DetectionReport]
    overhead: dict[int, metrics.OverheadReport]
    losses: dict[tuple[int, str], list[float]]


def cmd_evaluate(cfg: ExperimentConfig) -> Evaluation:
    prepared = _prepared(cfg)
    detection, overhead, losses = {}, {}, {}
    oc = cfg.overhead
    for data in prepared:
        for mode in cfg.modes:
            weights, threshold, meta = load_model(cfg, data.id, mode)
            detection[(data.id, mode)] = evaluate(weights, threshold, data, cfg.model.eval_stride)
            _, _, hpath = model_paths(cfg.out_dir, data.id, mode)
            if hpath.is_file():
                rows = hpath.read_text().splitlines()[1:]
                losses[(data.id, mode)] = [float(r.split(",")[1]) for r in rows]
            if mode == "federated":
                vehicles = cfg.federation_config().vehicles
                raw_packets = max(partition_sizes(meta["train_frames"], vehicles))
                overhead[data.id] = metrics.overhead_report(
                    meta["rounds"], oc.update_size or meta["update_size"], oc.t_sub, oc.t_pub,
                    raw_packets, oc.raw_packet_bytes,
                )
    ev = Evaluation(detection, overhead, losses)
    write_reports(cfg, ev)
    return ev


def write_reports(cfg: ExperimentConfig, ev: Evaluation) -> None:
    out = cfg.out_dir / "reports"
    det_rows = [metrics.detection_row(i, m, r) for (i, m), r in sorted(ev.detection.items())]
    kind_rows = [row for (i, m), r in sorted(ev.detection.items()) for row in metrics.kind_rows(i, m, r)]
    ovh_rows = [metrics.overhead_row(i, r) for i, r in sorted(ev.overhead.items())]
    atomic_write(out / "detection.csv", metrics.to_csv(det_rows, metrics.DETECTION_COLUMNS))
    atomic_write(out / "detection.txt", metrics.to_text_table(det_rows, metrics.DETECTION_COLUMNS))
    atomic_write(out / "detection_by_kind.csv", metrics.to_csv(kind_rows, metrics.KIND_COLUMNS))
    if ovh_rows:
        atomic_write(out / "overhead.csv", metrics.to_csv(ovh_rows, metrics.OVERHEAD_COLUMNS))
        atomic_write(out / "overhead.txt", metrics.to_text_table(ovh_rows, metrics.OVERHEAD_COLUMNS))
    if cfg.figures:
        from . import plotting

        plotting.detection_figure(det_rows, out / "detection.png")
        if ev.losses:
            plotting.loss_figure(ev.losses, out / "loss.png")
        if ovh_rows:
            plotting.overhead_figure(ovh_rows, out / "overhead.png")
