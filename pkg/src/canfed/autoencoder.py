"""LSTM autoencoder over 40-frame signal windows, written directly in numpy.

The encoder LSTM reads the window, its last hidden state is squeezed through
a tanh latent layer, and a decoder LSTM fed the latent vector at every step
reconstructs the window through a sigmoid output layer. Everything is
float64; gradients are exact backpropagation through time.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .candata import WINDOW_LEN, CanFrame, Window
from .errors import CanFedError, EmptyDataset, EmptyErrors, MissingLayout, ShapeMismatch
from .layout import SignalLayout, field_values, payload_bits

WEIGHTS_MAGIC = b"FCW1"


class DegenerateSignals(CanFedError):
    """Every variable signal of an ID is constant on the training data."""


@dataclass(frozen=True)
class ArchConfig:
    input_width: int
    enc_hidden: int = 32
    latent: int = 16
    dec_hidden: int = 32
    seq_len: int = WINDOW_LEN

    def __post_init__(self):
        if min(self.input_width, self.enc_hidden, self.latent, self.dec_hidden, self.seq_len) < 1:
            raise ShapeMismatch("all architecture sizes must be >= 1")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        k, he, lat, hd = self.input_width, self.enc_hidden, self.latent, self.dec_hidden
        return {
            "enc_W": (4 * he, k + he),
            "enc_b": (4 * he,),
            "lat_W": (lat, he),
            "lat_b": (lat,),
            "dec_W": (4 * hd, lat + hd),
            "dec_b": (4 * hd,),
            "out_W": (k, hd),
            "out_b": (k,),
        }

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes().values())


@dataclass
class ModelWeights:
    vector: np.ndarray
    arch: ArchConfig

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.shape != (self.arch.n_params,):
            raise ShapeMismatch(f"expected {self.arch.n_params} parameters, got {self.vector.shape}")

    @property
    def n_params(self) -> int:
        return self.vector.size

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.vector.copy(), self.arch)


def unpack(vector: np.ndarray, arch: ArchConfig) -> dict[str, np.ndarray]:
    """Named views into a flat parameter (or gradient) vector."""
    out = {}
    pos = 0
    for name, shape in arch.shapes().items():
        size = int(np.prod(shape))
        out[name] = vector[pos : pos + size].reshape(shape)
        pos += size
    return out


def init_weights(arch: ArchConfig, seed: int) -> ModelWeights:
    rng = np.random.default_rng(seed)
    return ModelWeights(rng.uniform(-0.1, 0.1, size=arch.n_params), arch)


def save_weights(path: Path | str, weights: ModelWeights) -> None:
    Path(path).write_bytes(encode_weights(weights.vector))


def encode_weights(vector: np.ndarray) -> bytes:
    return WEIGHTS_MAGIC + struct.pack("<I", vector.size) + vector.astype("<f4").tobytes()


def load_weights(path: Path | str, arch: ArchConfig) -> ModelWeights:
    data = Path(path).read_bytes()
    if data[:4] != WEIGHTS_MAGIC or len(data) < 8:
        raise CanFedError(f"{path}: not a weights file")
    (p,) = struct.unpack_from("<I", data, 4)
    if len(data) != 8 + 4 * p:
        raise CanFedError(f"{path}: truncated weights file")
    return ModelWeights(np.frombuffer(data, dtype="<f4", offset=8).astype(np.float64), arch)


# -- features ---------------------------------------------------------------


@dataclass(frozen=True)
class FeatureNorms:
    signal_indices: tuple[int, ...]
    lo: np.ndarray
    hi: np.ndarray

    @property
    def width(self) -> int:
        return len(self.signal_indices)


def raw_signal_values(frames: Sequence[CanFrame], layout: SignalLayout, indices: Sequence[int]) -> np.ndarray:
    bits = payload_bits([f.payload for f in frames])
    cols = [field_values(bits, layout.signals[i]) for i in indices]
    return np.stack(cols, axis=1).astype(np.float64) if cols else np.zeros((len(frames), 0))


def fit_norms(frames: Sequence[CanFrame], layout: SignalLayout | None) -> FeatureNorms:
    """Per-signal min/max over training frames; signals that never change are dropped."""
    if layout is None:
        raise MissingLayout("featurization needs a signal layout")
    candidates = layout.variable_signals()
    raw = raw_signal_values(frames, layout, candidates)
    if raw.shape[0] == 0:
        raise EmptyDataset("no training frames to fit normalization")
    lo, hi = raw.min(axis=0), raw.max(axis=0)
    keep = [j for j in range(len(candidates)) if hi[j] > lo[j]]
    if not keep:
        raise DegenerateSignals(f"id {layout.id:03X}: no signal varies on the training data")
    return FeatureNorms(tuple(candidates[j] for j in keep), lo[keep], hi[keep])


def feature_matrix(frames: Sequence[CanFrame], layout: SignalLayout | None, norms: FeatureNorms) -> np.ndarray:
    """``(n, k)`` min-max scaled signal values, clamped to [0, 1]."""
    if layout is None:
        raise MissingLayout("featurization needs a signal layout")
    raw = raw_signal_values(frames, layout, norms.signal_indices)
    return np.clip((raw - norms.lo) / (norms.hi - norms.lo), 0.0, 1.0)


def featurize(window: Window, layout: SignalLayout | None, norms: FeatureNorms) -> np.ndarray:
    return feature_matrix(window.frames, layout, norms)


def window_tensor(features: np.ndarray, stride: int = 1) -> np.ndarray:
    """Stack every ``stride``-th 40-row window of a feature matrix: ``(m, 40, k)``."""
    n = features.shape[0]
    if n < WINDOW_LEN:
        return np.zeros((0, WINDOW_LEN, features.shape[1]))
    view = sliding_window_view(features, WINDOW_LEN, axis=0)[::stride]
    return np.ascontiguousarray(view.transpose(0, 2, 1))


# -- forward / backward -----------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _output_sigmoid(a: np.ndarray) -> np.ndarray:
    # exp form keeps tiny outputs positive where the tanh form rounds to 0
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _check_input(weights: ModelWeights, x: np.ndarray) -> np.ndarray:
    arch = weights.arch
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (arch.seq_len, arch.input_width):
        raise ShapeMismatch(f"expected (*, {arch.seq_len}, {arch.input_width}) input, got {x.shape}")
    return x


def forward(weights: ModelWeights, x: np.ndarray, cache: bool = False):
    """Reconstruct a window (40, k) or batch (B, 40, k); outputs lie in (0, 1)."""
    xb = _check_input(weights, x)
    arch = weights.arch
    p = unpack(weights.vector, arch)
    B, T, k = xb.shape
    he, hd = arch.enc_hidden, arch.dec_hidden

    # encoder
    We_x, We_h = p["enc_W"][:, :k], p["enc_W"][:, k:]
    pre_in = xb @ We_x.T + p["enc_b"]
    h = np.zeros((B, he))
    c = np.zeros((B, he))
    enc = []
    for t in range(T):
        a = pre_in[:, t] + h @ We_h.T
        s = _sigmoid(a)
        i, f, o = s[:, :he], s[:, he : 2 * he], s[:, 3 * he :]
        g = np.tanh(a[:, 2 * he : 3 * he])
        c_prev, h_prev = c, h
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        if cache:
            enc.append((i, f, g, o, c_prev, h_prev, tc))
    h_enc = h
    z = np.tanh(h_enc @ p["lat_W"].T + p["lat_b"])

    # decoder, fed z at every step
    L = arch.latent
    Wd_x, Wd_h = p["dec_W"][:, :L], p["dec_W"][:, L:]
    pre_z = z @ Wd_x.T + p["dec_b"]
    h = np.zeros((B, hd))
    c = np.zeros((B, hd))
    dec = []
    hs = np.empty((B, T, hd))
    for t in range(T):
        a = pre_z + h @ Wd_h.T
        s = _sigmoid(a)
        i, f, o = s[:, :hd], s[:, hd : 2 * hd], s[:, 3 * hd :]
        g = np.tanh(a[:, 2 * hd : 3 * hd])
        c_prev, h_prev = c, h
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        hs[:, t] = h
        if cache:
            dec.append((i, f, g, o, c_prev, h_prev, tc))
    y = _output_sigmoid(hs @ p["out_W"].T + p["out_b"])
    out = y[0] if np.asarray(x).ndim == 2 else y
    if cache:
        return out, (xb, enc, h_enc, z, dec, hs, y)
    return out


def _lstm_backward(W, d_in, cache, dh_seq, dh_last, inputs, const_input):
    """Shared LSTM BPTT.

    ``dh_seq`` is (B, T, H) or None, ``dh_last`` (B, H) or None. Returns the
    weight gradient (same shape as W), bias gradient and the input gradient:
    (B, T, d) for sequence inputs or (B, d) summed for a constant input.
    """
    H = W.shape[0] // 4
    Wx, Wh = W[:, :d_in], W[:, d_in:]
    T = len(cache)
    B = cache[0][0].shape[0]
    dW_x = np.zeros_like(Wx)
    dW_h = np.zeros_like(Wh)
    db = np.zeros(W.shape[0])
    da_all = np.empty((B, T, 4 * H))
    dh = np.zeros((B, H)) if dh_last is None else dh_last.copy()
    dc = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        i, f, g, o, c_prev, h_prev, tc = cache[t]
        if dh_seq is not None:
            dh = dh + dh_seq[:, t]
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        da = da_all[:, t]
        da[:, :H] = dc * g * i * (1.0 - i)
        da[:, H : 2 * H] = dc * c_prev * f * (1.0 - f)
        da[:, 2 * H : 3 * H] = dc * i * (1.0 - g * g)
        da[:, 3 * H :] = do * o * (1.0 - o)
        dW_h += da.T @ h_prev
        dh = da @ Wh
        dc = dc * f
    db = da_all.sum(axis=(0, 1))
    if inputs is not None:
        dW_x = da_all.reshape(B * T, -1).T @ inputs.reshape(B * T, -1)
        d_input = da_all @ Wx
    else:
        da_sum = da_all.sum(axis=1)
        dW_x = da_sum.T @ const_input
        d_input = da_sum @ Wx
    return np.concatenate([dW_x, dW_h], axis=1), db, d_input


def loss_and_gradient(weights: ModelWeights, batch: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean-squared reconstruction loss over the batch and its exact gradient."""
    xb = _check_input(weights, batch)
    if xb.shape[0] == 0:
        raise EmptyDataset("empty batch")
    arch = weights.arch
    p = unpack(weights.vector, arch)
    y, (xb, enc, h_enc, z, dec, hs, _) = forward(weights, xb, cache=True)
    B, T, k = xb.shape
    resid = y - xb
    loss = float(np.mean(resid * resid))

    grad = np.zeros_like(weights.vector)
    g = unpack(grad, arch)
    d_pre_out = (2.0 / resid.size) * resid * y * (1.0 - y)  # (B, T, k)
    g["out_W"][...] = d_pre_out.reshape(B * T, k).T @ hs.reshape(B * T, -1)
    g["out_b"][...] = d_pre_out.sum(axis=(0, 1))
    dh_dec = d_pre_out @ p["out_W"]  # (B, T, hd)

    dW, db, dz = _lstm_backward(p["dec_W"], arch.latent, dec, dh_dec, None, None, z)
    g["dec_W"][...] = dW
    g["dec_b"][...] = db

    d_pre_z = dz * (1.0 - z * z)
    g["lat_W"][...] = d_pre_z.T @ h_enc
    g["lat_b"][...] = d_pre_z.sum(axis=0)
    dh_enc = d_pre_z @ p["lat_W"]

    dW, db, _ = _lstm_backward(p["enc_W"], k, enc, None, dh_enc, xb, None)
    g["enc_W"][...] = dW
    g["enc_b"][...] = db
    return loss, grad


def backward(weights: ModelWeights, batch: np.ndarray) -> np.ndarray:
    return loss_and_gradient(weights, batch)[1]


def mse_loss(reconstruction: np.ndarray, target: np.ndarray) -> float:
    reconstruction = np.asarray(reconstruction, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if reconstruction.shape != target.shape:
        raise ShapeMismatch(f"{reconstruction.shape} vs {target.shape}")
    d = reconstruction - target
    return float(np.mean(d * d))


def reconstruction_error(weights: ModelWeights, window: np.ndarray) -> float:
    return mse_loss(forward(weights, window), window)


def reconstruction_errors(weights: ModelWeights, windows: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Per-window MSE for an ``(m, 40, k)`` tensor."""
    out = np.empty(windows.shape[0])
    for s in range(0, windows.shape[0], chunk):
        xb = windows[s : s + chunk]
        d = forward(weights, xb) - xb
        out[s : s + chunk] = np.mean(d * d, axis=(1, 2))
    return out


def mean_loss(weights: ModelWeights, windows: np.ndarray) -> float:
    if windows.shape[0] == 0:
        raise EmptyDataset("no validation windows")
    return float(np.mean(reconstruction_errors(weights, windows)))


# -- training ---------------------------------------------------------------


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    clip_norm: float | None = None  # rescale larger gradients to this L2 norm


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    epochs_done: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))


def proximal_term(w: np.ndarray, anchor: np.ndarray, mu: float) -> np.ndarray:
    return mu * (w - anchor)


def local_train(
    weights_in: ModelWeights,
    dataset: np.ndarray,
    epochs: int,
    opt: OptimizerConfig = OptimizerConfig(),
    mu: float = 0.0,
    anchor: ModelWeights | None = None,
    seed: int | Sequence[int] = 0,
    state: AdamState | None = None,
) -> tuple[ModelWeights, AdamState]:
    """Mini-batch Adam over ``epochs`` passes, optionally with a FedProx proximal pull.

    The shuffle order of each epoch is drawn from ``seed`` and the running
    epoch count kept in ``state``, so splitting training into several calls
    that share one state reproduces a single long call exactly.
    """
    if epochs < 1:
        raise CanFedError("epochs must be >= 1")
    if mu < 0:
        raise CanFedError("mu must be >= 0")
    if dataset.shape[0] == 0:
        raise EmptyDataset("no training windows")
    seed_seq = [int(s) for s in np.atleast_1d(seed)]
    w = weights_in.vector.copy()
    anchor_vec = (anchor or weights_in).vector.copy()
    st = state if state is not None else AdamState.zeros(w.size)
    arch = weights_in.arch
    n = dataset.shape[0]
    for _ in range(epochs):
        order = np.random.default_rng(seed_seq + [st.epochs_done]).permutation(n)
        for s in range(0, n, opt.batch_size):
            batch = dataset[order[s : s + opt.batch_size]]
            _, grad = loss_and_gradient(ModelWeights(w, arch), batch)
            if mu:
                grad = grad + proximal_term(w, anchor_vec, mu)
            if opt.clip_norm is not None:
                norm = float(np.linalg.norm(grad))
                if norm > opt.clip_norm:
                    grad = grad * (opt.clip_norm / norm)
            st.step += 1
            st.m = opt.beta1 * st.m + (1 - opt.beta1) * grad
            st.v = opt.beta2 * st.v + (1 - opt.beta2) * grad * grad
            m_hat = st.m / (1 - opt.beta1**st.step)
            v_hat = st.v / (1 - opt.beta2**st.step)
            w = w - opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)
        st.epochs_done += 1
    return ModelWeights(w, arch), st


# -- thresholds -------------------------------------------------------------


@dataclass(frozen=True)
class Threshold:
    value: float
    source: str  # "quantile" | "labeled-optimal"

    def __post_init__(self):
        if not np.isfinite(self.value) or self.value < 0:
            raise CanFedError(f"threshold must be finite and >= 0, got {self.value}")


def compute_threshold(
    errors_clean: Sequence[float],
    errors_attack: Sequence[float] | None = None,
    mode: str = "labeled-optimal",
    q: float = 0.999,
) -> Threshold:
    """Pick the anomaly threshold on reconstruction errors.

    Labeled mode maximizes detection rate minus false-positive rate over the
    midpoints between consecutive distinct errors, preferring the smallest
    threshold on ties. Without attack errors it falls back to the linearly
    interpolated ``q`` quantile of the clean errors.
    """
    clean = np.asarray(errors_clean, dtype=np.float64)
    if clean.size == 0:
        raise EmptyErrors("need at least one clean error")
    attack = np.asarray(errors_attack if errors_attack is not None else [], dtype=np.float64)
    if mode == "quantile" or attack.size == 0:
        return Threshold(float(np.quantile(clean, q, method="linear")), "quantile")
    uniq = np.unique(np.concatenate([clean, attack]))
    if uniq.size == 1:
        return Threshold(float(uniq[0]), "labeled-optimal")
    cand = (uniq[:-1] + uniq[1:]) / 2
    clean_s, attack_s = np.sort(clean), np.sort(attack)
    # Youden's J scaled by |clean|·|attack| so ties compare exactly
    fp = clean.size - np.searchsorted(clean_s, cand, side="right")
    tp = attack.size - np.searchsorted(attack_s, cand, side="right")
    j = tp * clean.size - fp * attack.size
    best = int(np.argmax(j))  # first maximum == smallest threshold
    return Threshold(float(cand[best]), "labeled-optimal")


def classify(error: float, threshold: Threshold) -> str:
    return "anomaly" if error > threshold.value else "clean"


def flag(errors: np.ndarray, threshold: Threshold) -> np.ndarray:
    return np.asarray(errors) > threshold.value
