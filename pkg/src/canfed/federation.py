"""Synchronous federated training over a publish/subscribe transport.

Round 0 is the server's broadcast of the seeded initial model. In every
round r >= 1 each vehicle trains the global model it last received, reports
the validation loss of its local result together with its weights, and the
server answers with the sample-weighted average as global r. The global that
ends training carries the stop flag; afterwards the designated vehicle
derives the anomaly threshold from its labelled validation slice and the
server relays it to everyone.

Update payloads (little-endian)::

    RoundUpdate   FCU1 | vehicle_id u16 | round u32 | n_k u32 | loss f32 | P u32 | P x f32
    GlobalUpdate  FCG1 | round u32 | flags u8 | [threshold f32] | P u32 | P x f32
    Threshold     FCT1 | vehicle_id u16 | threshold f32

``FCU2``/``FCG2``/``FCT2`` are the same layouts with every real widened to f64.
"""

from __future__ import annotations

import logging
import struct
import threading
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .autoencoder import (
    AdamState,
    ArchConfig,
    ModelWeights,
    OptimizerConfig,
    Threshold,
    compute_threshold,
    init_weights,
    local_train,
    mean_loss,
    reconstruction_errors,
)
from .errors import CanFedError, EmptyDataset, MalformedFrame, NoUpdates, ShapeMismatch, StalledRound
from .pubsub import GLOBAL_TOPIC, LOCAL_TOPIC

log = logging.getLogger(__name__)

FLAG_STOP = 0x01
FLAG_THRESHOLD = 0x02

_MAGIC = {
    "f32": {"update": b"FCU1", "global": b"FCG1", "threshold": b"FCT1"},
    "f64": {"update": b"FCU2", "global": b"FCG2", "threshold": b"FCT2"},
}
THRESHOLD_MAGICS = {t["threshold"] for t in _MAGIC.values()}
_REAL = {"f32": ("f", "<f4"), "f64": ("d", "<f8")}


@dataclass(frozen=True)
class FederationConfig:
    vehicles: int = 5
    epochs: int = 1
    max_rounds: int = 200
    mu: float = 0.0
    patience: int = 10
    delta: float = 0.03
    seed: int = 0
    optimizer: OptimizerConfig = OptimizerConfig()
    threshold_vehicle: int = 0
    threshold_mode: str = "labeled-optimal"
    quantile: float = 0.999
    precision: str = "f32"

    def __post_init__(self):
        if self.vehicles < 1:
            raise CanFedError("vehicles must be >= 1")
        if self.epochs < 1 or self.max_rounds < 1 or self.patience < 1:
            raise CanFedError("epochs, max_rounds and patience must be >= 1")
        if self.mu < 0:
            raise CanFedError("mu must be >= 0")
        if not 0 <= self.delta < 1:
            raise CanFedError("delta must lie in [0, 1)")
        if not 0 <= self.threshold_vehicle < self.vehicles:
            raise CanFedError("threshold_vehicle must name one of the vehicles")
        if self.precision not in _MAGIC:
            raise CanFedError(f"precision must be one of {sorted(_MAGIC)}")


# -- messages ---------------------------------------------------------------


@dataclass
class RoundUpdate:
    vehicle_id: int
    round: int
    weights: ModelWeights
    n_k: int
    validation_loss: float

    def __post_init__(self):
        if self.n_k < 1:
            raise CanFedError("n_k must be >= 1")
        if not np.isfinite(self.validation_loss):
            raise CanFedError("validation loss must be finite")


@dataclass
class GlobalUpdate:
    round: int
    weights: ModelWeights | None
    stop: bool = False
    threshold: float | None = None


def _precision_of(magic: bytes, kind: str) -> str:
    for prec, table in _MAGIC.items():
        if table[kind] == magic:
            return prec
    raise MalformedFrame(f"unexpected magic {magic!r} for {kind} message")


def _vector_bytes(vec: np.ndarray, precision: str) -> bytes:
    return struct.pack("<I", vec.size) + np.asarray(vec).astype(_REAL[precision][1]).tobytes()


def _read_vector(data: bytes, pos: int, precision: str, arch: ArchConfig | None) -> np.ndarray:
    (p,) = struct.unpack_from("<I", data, pos)
    pos += 4
    width = np.dtype(_REAL[precision][1]).itemsize
    if len(data) != pos + p * width:
        raise MalformedFrame(f"payload length does not match P={p}")
    if arch is not None and p not in (0, arch.n_params):
        raise ShapeMismatch(f"expected {arch.n_params} parameters, got {p}")
    return np.frombuffer(data, dtype=_REAL[precision][1], offset=pos).astype(np.float64)


def encode_round_update(u: RoundUpdate, precision: str = "f32") -> bytes:
    code = _REAL[precision][0]
    head = _MAGIC[precision]["update"] + struct.pack(f"<HII{code}", u.vehicle_id, u.round, u.n_k, u.validation_loss)
    return head + _vector_bytes(u.weights.vector, precision)


def decode_round_update(data: bytes, arch: ArchConfig) -> RoundUpdate:
    try:
        prec = _precision_of(bytes(data[:4]), "update")
        code = _REAL[prec][0]
        vid, rnd, n_k, loss = struct.unpack_from(f"<HII{code}", data, 4)
        vec = _read_vector(data, 4 + struct.calcsize(f"<HII{code}"), prec, arch)
    except struct.error as exc:
        raise MalformedFrame(f"truncated round update: {exc}") from None
    return RoundUpdate(vid, rnd, ModelWeights(vec, arch), n_k, float(loss))


def encode_global_update(g: GlobalUpdate, precision: str = "f32") -> bytes:
    code = _REAL[precision][0]
    flags = (FLAG_STOP if g.stop else 0) | (FLAG_THRESHOLD if g.threshold is not None else 0)
    out = _MAGIC[precision]["global"] + struct.pack("<IB", g.round, flags)
    if g.threshold is not None:
        out += struct.pack(f"<{code}", g.threshold)
    vec = g.weights.vector if g.weights is not None else np.zeros(0)
    return out + _vector_bytes(vec, precision)


def decode_global_update(data: bytes, arch: ArchConfig) -> GlobalUpdate:
    try:
        prec = _precision_of(bytes(data[:4]), "global")
        code = _REAL[prec][0]
        rnd, flags = struct.unpack_from("<IB", data, 4)
        pos = 9
        threshold = None
        if flags & FLAG_THRESHOLD:
            (threshold,) = struct.unpack_from(f"<{code}", data, pos)
            threshold = float(threshold)
            pos += struct.calcsize(code)
        vec = _read_vector(data, pos, prec, arch)
    except struct.error as exc:
        raise MalformedFrame(f"truncated global update: {exc}") from None
    weights = ModelWeights(vec, arch) if vec.size else None
    return GlobalUpdate(rnd, weights, bool(flags & FLAG_STOP), threshold)


def encode_threshold(vehicle_id: int, value: float, precision: str = "f32") -> bytes:
    return _MAGIC[precision]["threshold"] + struct.pack(f"<H{_REAL[precision][0]}", vehicle_id, value)


def decode_threshold(data: bytes) -> tuple[int, float]:
    prec = _precision_of(bytes(data[:4]), "threshold")
    fmt = f"<H{_REAL[prec][0]}"
    if len(data) != 4 + struct.calcsize(fmt):
        raise MalformedFrame("bad threshold message length")
    vid, value = struct.unpack_from(fmt, data, 4)
    return vid, float(value)


# -- server-side arithmetic -------------------------------------------------


def aggregate(updates: Sequence[RoundUpdate]) -> ModelWeights:
    """Sample-weighted mean of the update weights."""
    if not updates:
        raise NoUpdates("nothing to aggregate")
    arch = updates[0].weights.arch
    p = updates[0].weights.n_params
    if any(u.weights.n_params != p for u in updates):
        raise ShapeMismatch("updates disagree on parameter count")
    if len(updates) == 1:
        return updates[0].weights.copy()
    n = np.array([u.n_k for u in updates], dtype=np.float64)
    stacked = np.stack([u.weights.vector for u in updates])
    mean = (n / n.sum()) @ stacked
    # rounding can push a convex combination a hair outside its inputs
    return ModelWeights(np.clip(mean, stacked.min(axis=0), stacked.max(axis=0)), arch)


def aggregate_validation_loss(losses: Sequence[float]) -> float:
    if len(losses) == 0:
        raise NoUpdates("no losses to average")
    return float(np.mean(losses))


@dataclass(frozen=True)
class EarlyStopState:
    best_loss: float = float("inf")
    rounds_since_improvement: int = 0


def early_stop_step(state: EarlyStopState, loss: float, patience: int, delta: float) -> tuple[EarlyStopState, bool]:
    """Improvement means beating the best loss by more than ``delta`` of it."""
    if state.best_loss == float("inf") or state.best_loss - loss > delta * state.best_loss:
        return EarlyStopState(loss, 0), False
    nxt = EarlyStopState(state.best_loss, state.rounds_since_improvement + 1)
    return nxt, nxt.rounds_since_improvement >= patience


# -- data and history -------------------------------------------------------


@dataclass
class VehicleData:
    """Pre-windowed local data of one vehicle.

    ``calibration``/``calibration_attack`` are the labelled validation
    windows used only by the threshold vehicle.
    """

    train: np.ndarray
    validation: np.ndarray
    calibration: np.ndarray | None = None
    calibration_attack: np.ndarray | None = None

    def __post_init__(self):
        if self.train.shape[0] == 0:
            raise EmptyDataset("vehicle has no training windows")
        if self.validation.shape[0] == 0:
            raise EmptyDataset("vehicle has no validation windows")

    @property
    def n_samples(self) -> int:
        return self.train.shape[0]


def threshold_source(data: VehicleData, mode: str) -> str:
    labelled = data.calibration is not None and data.calibration_attack is not None
    return mode if labelled and np.any(data.calibration_attack) else "quantile"


def threshold_from(weights: ModelWeights, data: VehicleData, mode: str, q: float) -> Threshold:
    if data.calibration is None or data.calibration.shape[0] == 0:
        return compute_threshold(reconstruction_errors(weights, data.validation), mode="quantile", q=q)
    errors = reconstruction_errors(weights, data.calibration)
    attack = np.zeros(errors.size, bool) if data.calibration_attack is None else np.asarray(data.calibration_attack, bool)
    return compute_threshold(errors[~attack], errors[attack] if attack.any() else None, mode=mode, q=q)


@dataclass
class RoundRecord:
    round: int
    global_loss: float
    vehicle_losses: tuple[float, ...]
    stop: bool


@dataclass
class VehicleTraffic:
    dl_bytes: int = 0
    ul_bytes: int = 0
    threshold_bytes: int = 0
    retransmitted_bytes: int = 0


@dataclass
class TrainingHistory:
    rounds: list[RoundRecord]
    global_weights: list[np.ndarray]
    final_weights: ModelWeights
    threshold: Threshold
    stopped_early: bool
    update_size: int = 0
    global_size: int = 0
    traffic: dict[int, VehicleTraffic] = field(default_factory=dict)

    @property
    def n_rounds(self) -> int:
        return len(self.rounds)


# -- agents -----------------------------------------------------------------


class Client(Protocol):
    def subscribe(self, topic: str, handler=None) -> str: ...
    def publish(self, topic: str, payload: bytes) -> None: ...
    def receive(self, timeout: float | None = None) -> tuple[str, bytes] | None: ...
    def close(self) -> None: ...


class ServerAgent:
    def __init__(self, config: FederationConfig, arch: ArchConfig, client: Client):
        self.config = config
        self.arch = arch
        self.client = client
        self.round = 0
        self.stop_state = EarlyStopState()
        self.pending: dict[int, RoundUpdate] = {}
        self.records: list[RoundRecord] = []
        self.broadcasts: list[np.ndarray] = []
        self.global_size = 0
        self.update_size = 0
        self.stopped_early = False
        self.threshold: float | None = None
        self.finished = False

    def _broadcast(self, g: GlobalUpdate) -> None:
        payload = encode_global_update(g, self.config.precision)
        if g.weights is not None:
            # keep what vehicles actually receive, wire rounding included
            self.broadcasts.append(decode_global_update(payload, self.arch).weights.vector)
            self.global_size = len(payload)
        self.client.publish(GLOBAL_TOPIC, payload)

    def start(self) -> None:
        self._broadcast(GlobalUpdate(0, init_weights(self.arch, self.config.seed)))

    def handle(self, topic: str, payload: bytes) -> None:
        if bytes(payload[:4]) in THRESHOLD_MAGICS:
            vid, value = decode_threshold(payload)
            log.info("threshold %.6g from vehicle %d", value, vid)
            self.threshold = value
            self._broadcast(GlobalUpdate(self.round, None, False, value))
            self.finished = True
            return
        u = decode_round_update(payload, self.arch)
        if u.round != self.round + 1 or not 0 <= u.vehicle_id < self.config.vehicles:
            log.warning("ignoring update from vehicle %d for round %d", u.vehicle_id, u.round)
            return
        self.pending[u.vehicle_id] = u
        self.update_size = len(payload)
        if len(self.pending) < self.config.vehicles:
            return
        updates = [self.pending[v] for v in sorted(self.pending)]
        self.pending = {}
        self.round += 1
        losses = tuple(u.validation_loss for u in updates)
        loss = aggregate_validation_loss(losses)
        self.stop_state, early = early_stop_step(self.stop_state, loss, self.config.patience, self.config.delta)
        stop = early or self.round >= self.config.max_rounds
        self.stopped_early = early
        self.records.append(RoundRecord(self.round, loss, losses, stop))
        self._broadcast(GlobalUpdate(self.round, aggregate(updates), stop))


class VehicleAgent:
    def __init__(self, vehicle_id: int, data: VehicleData, config: FederationConfig, arch: ArchConfig, client: Client):
        self.vehicle_id = vehicle_id
        self.data = data
        self.config = config
        self.arch = arch
        self.client = client
        self.state: AdamState | None = None
        self.weights: ModelWeights | None = None
        self.threshold: float | None = None
        self.traffic = VehicleTraffic()
        self.finished = False

    def start(self) -> None:
        pass

    def handle(self, topic: str, payload: bytes) -> None:
        g = decode_global_update(payload, self.arch)
        if g.threshold is not None:
            self.traffic.threshold_bytes += len(payload)
            self.threshold = g.threshold
            self.finished = True
            return
        self.traffic.dl_bytes += len(payload)
        self.weights = g.weights
        cfg = self.config
        if g.stop:
            if self.vehicle_id == cfg.threshold_vehicle:
                th = threshold_from(g.weights, self.data, cfg.threshold_mode, cfg.quantile)
                msg = encode_threshold(self.vehicle_id, th.value, cfg.precision)
                self.traffic.threshold_bytes += len(msg)
                self.client.publish(LOCAL_TOPIC, msg)
            return
        trained, self.state = local_train(
            g.weights,
            self.data.train,
            cfg.epochs,
            cfg.optimizer,
            mu=cfg.mu,
            anchor=g.weights,
            seed=[cfg.seed, self.vehicle_id],
            state=self.state,
        )
        loss = mean_loss(trained, self.data.validation)
        msg = encode_round_update(
            RoundUpdate(self.vehicle_id, g.round + 1, trained, self.data.n_samples, loss), cfg.precision
        )
        self.traffic.ul_bytes += len(msg)
        self.client.publish(LOCAL_TOPIC, msg)


# -- transports -------------------------------------------------------------


class LoopbackTransport:
    """Single-threaded deterministic driver over a :class:`LoopbackNetwork`."""

    def __init__(self, network):
        self.network = network

    def connect(self, client_id: str) -> Client:
        return self.network.connect(client_id)

    def run(self, agents: Sequence) -> None:
        for a in agents:
            a.start()
        while not all(a.finished for a in agents):
            progressed = False
            for a in agents:
                while a.client.inbox and not a.finished:
                    a.handle(*a.client.inbox.popleft())
                    progressed = True
            if not progressed and not self.network.step():
                unfinished = [getattr(a, "vehicle_id", "server") for a in agents if not a.finished]
                raise StalledRound(f"network idle while waiting on {unfinished}")


class TcpTransport:
    """One thread per agent; a silent inbox for ``stall_timeout`` seconds aborts the run."""

    def __init__(self, address: str | tuple[str, int], token: str, stall_timeout: float = 600.0, **client_opts):
        self.address = address
        self.token = token
        self.stall_timeout = stall_timeout
        self.client_opts = client_opts

    def connect(self, client_id: str) -> Client:
        from .pubsub.tcp import TcpClient

        return TcpClient(self.address, self.token, client_id, **self.client_opts)

    def run(self, agents: Sequence) -> None:
        errors: list[BaseException] = []

        def loop(agent) -> None:
            try:
                while not agent.finished and not errors:
                    msg = agent.client.receive(timeout=self.stall_timeout)
                    if msg is None:
                        raise StalledRound(f"no message within {self.stall_timeout}s")
                    agent.handle(*msg)
            except BaseException as exc:  # surfaced to the caller below
                errors.append(exc)

        threads = [threading.Thread(target=loop, args=(a,), daemon=True) for a in agents]
        for t in threads:
            t.start()
        agents[0].start()
        for t in threads:
            t.join()
        if errors:
            raise errors[0]


def run_federation(config: FederationConfig, vehicles: Sequence[VehicleData], arch: ArchConfig, transport) -> TrainingHistory:
    if len(vehicles) != config.vehicles:
        raise CanFedError(f"got {len(vehicles)} partitions for {config.vehicles} vehicles")
    server = ServerAgent(config, arch, transport.connect("server"))
    server.client.subscribe(LOCAL_TOPIC)
    fleet = []
    for vid, data in enumerate(vehicles):
        agent = VehicleAgent(vid, data, config, arch, transport.connect(f"vehicle-{vid}"))
        agent.client.subscribe(GLOBAL_TOPIC)
        fleet.append(agent)
    try:
        transport.run([server, *fleet])
    finally:
        for a in (server, *fleet):
            a.client.close()
    for a in fleet:
        a.traffic.retransmitted_bytes = a.client.retransmitted_bytes
    return TrainingHistory(
        rounds=server.records,
        global_weights=server.broadcasts,
        final_weights=ModelWeights(server.broadcasts[-1], arch),
        threshold=Threshold(server.threshold, threshold_source(vehicles[config.threshold_vehicle], config.threshold_mode)),
        stopped_early=server.stopped_early,
        update_size=server.update_size,
        global_size=server.global_size,
        traffic={a.vehicle_id: a.traffic for a in fleet},
    )


def train_centralized(config: FederationConfig, data: VehicleData, arch: ArchConfig) -> TrainingHistory:
    """Pooled training with the same round/early-stopping schedule as a one-vehicle federation."""
    w = init_weights(arch, config.seed)
    weights = [w.vector.copy()]
    state = None
    stop_state = EarlyStopState()
    records: list[RoundRecord] = []
    early = False
    for r in range(1, config.max_rounds + 1):
        w, state = local_train(w, data.train, config.epochs, config.optimizer, mu=0.0, seed=[config.seed, 0], state=state)
        loss = mean_loss(w, data.validation)
        stop_state, early = early_stop_step(stop_state, loss, config.patience, config.delta)
        stop = early or r == config.max_rounds
        records.append(RoundRecord(r, loss, (loss,), stop))
        weights.append(w.vector.copy())
        if stop:
            break
    th = threshold_from(w, data, config.threshold_mode, config.quantile)
    return TrainingHistory(records, weights, w, th, early)
