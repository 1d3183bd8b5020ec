"""End-to-end acceptance checks, one test per criterion.

Each test records a short ``detail`` property; conftest turns the outcomes
into one PASS/FAIL line per criterion in the terminal summary.
"""

import time
from pathlib import Path

import numpy as np
import pytest
from oracles import OVERHEAD_TABLE, brute_weighted_mean, central_differences, max_relative_error

from canfed import experiment
from canfed.attacks import AttackKind, AttackSpec, apply_attack
from canfed.autoencoder import ArchConfig, ModelWeights, forward, loss_and_gradient, mse_loss
from canfed.candata import CanFrame, IdStream, TrafficSpec, group_by_id, random_id_traffic, synthesize_traffic
from canfed.cli import main
from canfed.config import load_config
from canfed.federation import EarlyStopState, RoundUpdate, aggregate, early_stop_step
from canfed.layout import SignalClass, get_field
from canfed.metrics import overhead_report
from canfed.pubsub import FaultSpec, LoopbackNetwork
from canfed.segmentation import segment_stream

DESK_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk.yaml"


def test_criterion_01_overhead_table(record_property):
    t0 = time.perf_counter()
    worst = 0.0
    for _, rounds, dl_t, ul_t, dl, ul, _ in OVERHEAD_TABLE:
        rep = overhead_report(rounds, update_size=372_893, t_sub=0.180, t_pub=0.411)
        got = (rep.dl_time, rep.ul_time, rep.dl_mib, rep.ul_mib)
        worst = max(worst, *(abs(g - w) for g, w in zip(got, (dl_t, ul_t, dl, ul))))
    elapsed = time.perf_counter() - t0
    record_property("detail", f"13 rows, worst deviation {worst:.4f}, {elapsed * 1e3:.1f} ms")
    assert worst <= 0.01 + 1e-9
    assert elapsed < 1.0


def test_criterion_02_centralized_federated_equivalence(record_property):
    cfg = load_config(None, [
        "seed=5",
        "data.synthetic={ids: [0x0DE], frames: 4000}",
        "attacks.kinds=[MASQ_FUZZ]",
        "model={enc_hidden: 6, latent: 3, dec_hidden: 6, train_stride: 2}",
        "federation={vehicles: 1, epochs: 1, mu: 0.0, max_rounds: 5, precision: f64}",
        "optimizer={lr: 0.01, batch_size: 32}",
    ])
    t0 = time.perf_counter()
    (data,) = experiment._prepared(cfg)
    cen = experiment.train_mode(cfg, data, "centralized")
    fed = experiment.train_mode(cfg, data, "federated")
    diff = float(np.max(np.abs(cen.final_weights.vector - fed.final_weights.vector)))
    elapsed = time.perf_counter() - t0
    record_property("detail", f"{fed.n_rounds} rounds, max |w_cen - w_fed| = {diff:.2e}, {elapsed:.1f} s")
    assert cen.n_rounds == fed.n_rounds == 5
    assert diff <= 1e-12
    assert elapsed < 60


def _random_arch(rng):
    while True:
        arch = ArchConfig(*(int(rng.integers(1, hi)) for hi in (5, 7, 5, 7)))
        if arch.n_params <= 500:
            return arch


def test_criterion_03_gradient_correctness(record_property):
    t0 = time.perf_counter()
    worst, sizes = 0.0, []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        arch = _random_arch(rng)
        w = ModelWeights(rng.normal(scale=0.5, size=arch.n_params), arch)
        batch = rng.uniform(0, 1, size=(2, arch.seq_len, arch.input_width))
        _, grad = loss_and_gradient(w, batch)
        numeric = central_differences(lambda v: mse_loss(forward(ModelWeights(v, arch), batch), batch), w.vector, h=1e-5)
        worst = max(worst, max_relative_error(grad, numeric))
        sizes.append(arch.n_params)
    elapsed = time.perf_counter() - t0
    record_property("detail", f"P in [{min(sizes)}, {max(sizes)}], max rel err {worst:.2e}, {elapsed:.1f} s")
    assert worst < 1e-4
    assert elapsed < 60


def test_criterion_04_aggregation_oracle(record_property):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(1000):
        arch = ArchConfig(*(int(rng.integers(1, 3)) for _ in range(4)))
        v = int(rng.integers(1, 21))
        scale = 10.0 ** rng.integers(-3, 4)
        vectors = rng.normal(scale=scale, size=(v, arch.n_params))
        counts = rng.integers(1, 10**6, size=v)
        updates = [RoundUpdate(i, 1, ModelWeights(vec, arch), int(n), 0.0) for i, (vec, n) in enumerate(zip(vectors, counts))]
        out = aggregate(updates).vector
        expected = np.array(brute_weighted_mean(vectors.tolist(), counts.tolist()))
        worst = max(worst, float(np.max(np.abs(out - expected) / np.maximum(1.0, np.abs(expected)))))
        assert np.all(out >= vectors.min(axis=0)) and np.all(out <= vectors.max(axis=0))
    record_property("detail", f"1000 update sets, max error {worst:.2e}, all within envelope")
    assert worst <= 1e-12


def test_criterion_05_exactly_once_delivery(record_property):
    t0 = time.perf_counter()
    net = LoopbackNetwork(seed=2024, faults=FaultSpec(drop=0.3, dup=0.3, delay=0.2), max_retries=40, keep_trace=False)
    pubs = [net.connect(f"p{i}") for i in range(4)]
    subs = [net.connect(f"s{i}") for i in range(2)]
    for s in subs:
        s.subscribe("t")
    sent = []
    for i in range(10_000):
        payload = f"{i % 4}:{i}".encode()
        pubs[i % 4].publish("t", payload)
        sent.append(payload)
    net.run_until_idle()
    elapsed = time.perf_counter() - t0
    retrans = sum(p.retransmitted_bytes for p in pubs)
    record_property("detail", f"10000 messages x 2 subscribers, {retrans} bytes retransmitted, {elapsed:.1f} s")
    for s in subs:
        got = [p for _, p in s.inbox]
        assert len(got) == len(sent) and set(got) == set(sent)
        for origin in range(4):
            tag = f"{origin}:".encode()
            assert [p for p in got if p.startswith(tag)] == [p for p in sent if p.startswith(tag)]
    assert retrans > 0
    assert elapsed < 120


def _random_case(rng):
    traffic = random_id_traffic(rng, 0x0DE, checksum_prob=0.3)
    layout = traffic.layout()
    n = int(rng.integers(80, 200))
    words = rng.integers(0, 256, size=(n, 8), dtype=np.uint8)
    stream = IdStream(0x0DE, tuple(CanFrame(round(i * 0.01, 6), 0x0DE, 8, bytes(w)) for i, w in enumerate(words)))
    length = int(rng.integers(1, 30))
    start = int(rng.integers(length, n - length))
    return stream, layout, start, length


def _check_attack(kind, rng):
    stream, layout, start, length = _random_case(rng)
    frames = stream.frames
    n = len(frames)
    target = None
    if kind is AttackKind.MASQ_SEAMLESS:
        movable = [i for i, s in enumerate(layout.signals) if s.kind in (SignalClass.PHYSICAL, SignalClass.COUNTER)]
        target = int(rng.choice(movable))
    spec = AttackSpec(kind, 0x0DE, start, length, target_signal=target, seed=int(rng.integers(2**31)))
    out = apply_attack(stream, spec, layout).frames.frames
    if kind is AttackKind.INJECT_REPLAY:
        assert len(out) == n + length
        assert [f.payload for f in out[start : start + length]] == [f.payload for f in frames[start - length : start]]
        return
    if kind is AttackKind.DROP:
        assert len(out) == n - length
        assert out == frames[:start] + frames[start + length :]
        return
    assert len(out) == n
    assert [f.timestamp for f in out] == [f.timestamp for f in frames]
    if kind is AttackKind.MASQ_FUZZ:
        for a, b in zip(frames, out):
            for s in layout.signals:
                if s.kind is SignalClass.CONSTANT:
                    assert get_field(a.payload, s.start_bit, s.length_bits) == get_field(b.payload, s.start_bit, s.length_bits)
    elif kind is AttackKind.MASQ_SEAMLESS:
        sig = layout.signals[target]
        vals = [get_field(f.payload, sig.start_bit, sig.length_bits) for f in out[start : start + length]]
        top = (1 << sig.length_bits) - 1
        assert vals[-1] in (0, top)
        steps = np.diff(vals)
        assert (steps >= 0).all() if vals[-1] == top else (steps <= 0).all()
    elif kind is AttackKind.MASQ_REPLAY:
        assert [f.payload for f in out[start : start + length]] == [f.payload for f in frames[start - length : start]]


def test_criterion_06_attack_generator_contracts(record_property):
    for kind in AttackKind:
        rng = np.random.default_rng(list(kind.value.encode()))
        for _ in range(500):
            _check_attack(kind, rng)
    record_property("detail", f"500 seeded cases for each of {len(AttackKind)} kinds")


def test_criterion_07_segmentation_recovery(record_property):
    recovered = total = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        traffic = random_id_traffic(rng, 0x100)
        stream = group_by_id(synthesize_traffic(TrafficSpec([traffic], 512 * 0.01, seed)))[0x100]
        assert len(stream) >= 512
        planted = traffic.layout().canonical().signals
        found = set(segment_stream(stream).canonical().signals)
        recovered += sum(s in found for s in planted)
        total += len(planted)
    record_property("detail", f"{recovered}/{total} planted signals recovered ({recovered / total:.1%})")
    assert recovered / total >= 0.95


def _rounds_until_stop(losses, patience=10, delta=0.03):
    state = EarlyStopState()
    for r, loss in enumerate(losses, 1):
        state, stop = early_stop_step(state, loss, patience, delta)
        if stop:
            return r
    return None


def test_criterion_08_early_stopping(record_property):
    plateau = _rounds_until_stop([1.0] * 50)
    # first round sets the baseline, then ten non-improving rounds
    assert plateau == 11
    r_max = 200
    improving = _rounds_until_stop([0.96**r for r in range(r_max)])
    assert improving is None
    noisy_plateau = _rounds_until_stop([1.0] + [0.98 + 0.01 * (r % 2) for r in range(r_max)])
    assert noisy_plateau == 11
    record_property("detail", f"plateau stops at round {plateau}, 4%/round improvement runs all {r_max} rounds")


@pytest.mark.slow
def test_criterion_09_desk_scale_detection(record_property, tmp_path):
    t0 = time.perf_counter()
    cfg = load_config(DESK_CONFIG, [f"out={tmp_path}", "figures=false"])
    experiment.cmd_train(cfg)
    ev = experiment.cmd_evaluate(cfg)
    elapsed = time.perf_counter() - t0

    def pooled(mode):
        reps = [r for (_, m), r in ev.detection.items() if m == mode]
        tp, fn = sum(r.tp for r in reps), sum(r.fn for r in reps)
        fp, tn = sum(r.fp for r in reps), sum(r.tn for r in reps)
        return tp / (tp + fn), fp / (fp + tn)

    cen_dr, cen_fpr = pooled("centralized")
    fed_dr, fed_fpr = pooled("federated")
    record_property(
        "detail",
        f"centralized DR {cen_dr:.3f} FPR {cen_fpr:.3f}, federated DR {fed_dr:.3f} FPR {fed_fpr:.3f}, {elapsed / 60:.1f} min",
    )
    assert len(ev.detection) == 6
    assert cen_dr >= 0.9 and cen_fpr <= 0.1
    assert cen_dr - fed_dr <= 0.1
    assert elapsed < 15 * 60


def test_criterion_10_determinism(record_property, tmp_path):
    cfg = tmp_path / "exp.yaml"
    cfg.write_text(
        "seed: 11\n"
        "data: {synthetic: {ids: [0x0DE, 0x116], frames: 4000}}\n"
        "attacks: {kinds: [MASQ_FUZZ, MASQ_SEAMLESS, INJECT_REPLAY], validation_per_kind: 2, test_per_kind: 2}\n"
        "model: {enc_hidden: 4, latent: 2, dec_hidden: 4, train_stride: 3}\n"
        "federation: {vehicles: 3, max_rounds: 3}\n"
        "transport: {kind: loopback, drop: 0.2, dup: 0.2, delay: 0.1, max_retries: 40}\n"
    )
    trees = []
    for name in ("a", "b"):
        out = tmp_path / name
        for cmd in ("segment", "attack", "run"):
            assert main([cmd, "--config", str(cfg), "--out", str(out)]) == 0
        trees.append({p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()})
    record_property("detail", f"{len(trees[0])} output files byte-identical across two runs")
    assert trees[0].keys() == trees[1].keys()
    assert trees[0] == trees[1]
