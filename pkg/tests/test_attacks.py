from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from canfed.attacks import (
    CLEAN,
    AttackKind,
    AttackSpec,
    apply_attacks,
    drop_attack,
    format_labels,
    inject_replay,
    masquerade_fuzz,
    masquerade_replay,
    masquerade_seamless,
    parse_labels,
    plan_attacks,
    read_manifest,
    seamless_ramp,
    write_manifest,
)
from canfed.candata import CanFrame, IdStream
from canfed.errors import MissingLayout, NotAPhysicalSignal, OutOfRange
from canfed.layout import Signal, SignalClass, SignalLayout, get_field

C, K, P = SignalClass.CONSTANT, SignalClass.COUNTER, SignalClass.PHYSICAL
LAYOUT = SignalLayout(0x0DE, (Signal(0, 8, P), Signal(8, 4, K), Signal(12, 20, C), Signal(32, 32, P)))


def _stream(n, can_id=0x0DE, period=0.01):
    return IdStream(
        can_id,
        tuple(CanFrame(round(i * period, 6), can_id, 8, (i * 0x01_02_03_04_05_06_07).to_bytes(8, "big")) for i in range(n)),
    )


def _spec(kind, start=50, length=25, **kw):
    return AttackSpec(kind, 0x0DE, start, length, **kw)


class TestInjectReplay:
    def test_example(self):
        s = _stream(100)
        out = inject_replay(s, _spec(AttackKind.INJECT_REPLAY))
        assert len(out.frames) == 125
        for i in range(25):
            assert out.frames.frames[50 + i].payload == s.frames[25 + i].payload
        assert out.attacked_indices() == list(range(50, 75))

    def test_timestamps_interleave_at_half_period(self):
        s = _stream(100)
        out = inject_replay(s, _spec(AttackKind.INJECT_REPLAY))
        ts = [f.timestamp for f in out.frames.frames]
        assert ts == sorted(ts)
        assert ts[50] == pytest.approx(s.frames[49].timestamp + 0.005)

    def test_single_frame(self):
        out = inject_replay(_stream(100), _spec(AttackKind.INJECT_REPLAY, length=1))
        assert len(out.frames) == 101
        assert out.frames.frames[50].payload == out.frames.frames[49].payload

    def test_short_source(self):
        with pytest.raises(OutOfRange):
            inject_replay(_stream(100), _spec(AttackKind.INJECT_REPLAY, start=10))


class TestMasqueradeFuzz:
    def test_all_constant_is_noop(self):
        s = _stream(100)
        out = masquerade_fuzz(s, _spec(AttackKind.MASQ_FUZZ), SignalLayout(0x0DE, (Signal(0, 64, C),)))
        assert out.frames == s

    def test_constant_bits_preserved(self):
        s = _stream(100)
        out = masquerade_fuzz(s, _spec(AttackKind.MASQ_FUZZ, seed=3), LAYOUT)
        changed = 0
        for a, b in zip(s.frames[50:75], out.frames.frames[50:75]):
            assert get_field(a.payload, 12, 20) == get_field(b.payload, 12, 20)
            changed += a.payload != b.payload
        assert changed > 20
        assert [f.timestamp for f in out.frames.frames] == [f.timestamp for f in s.frames]

    def test_seeded(self):
        s = _stream(100)
        a = masquerade_fuzz(s, _spec(AttackKind.MASQ_FUZZ, seed=9), LAYOUT)
        b = masquerade_fuzz(s, _spec(AttackKind.MASQ_FUZZ, seed=9), LAYOUT)
        assert a == b

    def test_missing_layout(self):
        with pytest.raises(MissingLayout):
            masquerade_fuzz(_stream(100), _spec(AttackKind.MASQ_FUZZ), None)


class TestMasqueradeReplay:
    def test_example(self):
        s = _stream(100)
        out = masquerade_replay(s, _spec(AttackKind.MASQ_REPLAY))
        for i in range(25):
            assert out.frames.frames[50 + i].payload == s.frames[25 + i].payload
        assert [f.timestamp for f in out.frames.frames] == [f.timestamp for f in s.frames]
        assert len(out.attacked_indices()) == 25

    def test_boundary_source(self):
        s = _stream(100)
        out = masquerade_replay(s, _spec(AttackKind.MASQ_REPLAY, start=25))
        assert [f.payload for f in out.frames.frames[25:50]] == [f.payload for f in s.frames[:25]]

    def test_region_past_end(self):
        with pytest.raises(OutOfRange):
            masquerade_replay(_stream(60), _spec(AttackKind.MASQ_REPLAY, start=40))


class TestSeamless:
    def test_ramp_from_zero(self):
        # exact rational ramp, rounded half up
        expected = [int(Fraction(255 * i, 24) + Fraction(1, 2)) for i in range(25)]
        assert seamless_ramp(0, 255, 25) == expected
        assert expected[0] == 0 and expected[-1] == 255

    def test_already_at_extreme(self):
        assert seamless_ramp(255, 255, 25) == [255] * 25

    def test_single_frame_jumps(self):
        assert seamless_ramp(17, 0, 1) == [0]

    def test_direction_and_untouched_bits(self):
        s = _stream(100)
        out = masquerade_seamless(s, _spec(AttackKind.MASQ_SEAMLESS, target_signal=0), LAYOUT)
        v0 = get_field(s.frames[49].payload, 0, 8)
        vals = [get_field(f.payload, 0, 8) for f in out.frames.frames[50:75]]
        assert vals[-1] == (255 if v0 < 128 else 0)
        for a, b in zip(s.frames[50:75], out.frames.frames[50:75]):
            assert a.payload[1:] == b.payload[1:]

    def test_rejects_constant_target(self):
        with pytest.raises(NotAPhysicalSignal):
            masquerade_seamless(_stream(100), _spec(AttackKind.MASQ_SEAMLESS, target_signal=2), LAYOUT)


class TestDrop:
    def test_example(self):
        s = _stream(100)
        out = drop_attack(s, _spec(AttackKind.DROP))
        assert len(out.frames) == 75
        assert out.frames.frames == s.frames[:50] + s.frames[75:]
        assert out.attacked_indices() == [50]

    def test_whole_stream(self):
        with pytest.raises(OutOfRange):
            drop_attack(_stream(100), _spec(AttackKind.DROP, start=0, length=100))


class TestPlanAndFiles:
    def test_plan_non_overlapping(self):
        specs = plan_attacks(5000, 0x0DE, list(AttackKind), 3, seed=1, layout=LAYOUT)
        assert len(specs) == 15
        starts = sorted(s.start_index for s in specs)
        assert all(b - a >= 25 + 80 for a, b in zip(starts, starts[1:]))
        seamless = [s for s in specs if s.kind is AttackKind.MASQ_SEAMLESS]
        assert all(LAYOUT.signals[s.target_signal].kind is P for s in seamless)

    def test_plan_does_not_fit(self):
        with pytest.raises(OutOfRange):
            plan_attacks(300, 0x0DE, [AttackKind.MASQ_FUZZ], 5, seed=0)

    def test_apply_many_labels(self):
        s = _stream(3000)
        specs = plan_attacks(3000, 0x0DE, list(AttackKind), 2, seed=4, layout=LAYOUT)
        out = apply_attacks(s, specs, LAYOUT)
        n_inject = sum(s.kind is AttackKind.INJECT_REPLAY for s in specs)
        n_drop = sum(s.kind is AttackKind.DROP for s in specs)
        assert len(out.frames) == 3000 + 25 * (n_inject - n_drop)
        assert len(out.attacked_indices()) == 25 * (len(specs) - n_drop) + n_drop

    def test_manifest_round_trip(self, tmp_path):
        specs = plan_attacks(5000, 0x0DE, list(AttackKind), 2, seed=2, layout=LAYOUT)
        path = tmp_path / "manifest.csv"
        write_manifest(path, specs)
        assert [(s.kind, s.id, s.start_index, s.length, s.seed, s.target_signal) for s in read_manifest(path)] == [
            (s.kind, s.id, s.start_index, s.length, s.seed, s.target_signal) for s in specs
        ]

    def test_label_sidecar(self):
        labels = [CLEAN, "DROP", CLEAN, "MASQ_FUZZ"]
        assert format_labels(labels) == "0\nDROP\n0\nMASQ_FUZZ\n"
        assert parse_labels(format_labels(labels)) == labels


@settings(max_examples=40)
@given(st.sampled_from(list(AttackKind)), st.integers(25, 200), st.integers(1, 25), st.integers(0, 2**31))
def test_changes_confined_to_region(kind, start, length, seed):
    s = _stream(260)
    spec = AttackSpec(kind, 0x0DE, start, length, target_signal=0, seed=seed)
    out = apply_attacks(s, [spec], LAYOUT)
    got = out.frames.frames
    if kind is AttackKind.INJECT_REPLAY:
        assert got[:start] == s.frames[:start]
        assert [f.payload for f in got[start + length :]] == [f.payload for f in s.frames[start:]]
    elif kind is AttackKind.DROP:
        assert got == s.frames[:start] + s.frames[start + length :]
    else:
        assert got[:start] == s.frames[:start] and got[start + length :] == s.frames[start + length :]
    expected = 1 if kind is AttackKind.DROP else length
    assert len(out.attacked_indices()) == expected
