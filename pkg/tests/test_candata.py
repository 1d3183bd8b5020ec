import io

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from canfed.candata import (
    CanFrame,
    IdStream,
    IdTraffic,
    PlantedSignal,
    TrafficSpec,
    group_by_id,
    parse_log,
    partition,
    partition_sizes,
    serialize_log,
    split_fractions,
    synthesize_traffic,
    windows,
)
from canfed.errors import DlcMismatch, EmptySpec, InvalidId, MalformedLine, ZeroVehicles
from canfed.layout import SignalClass, get_field


def _stream(n, can_id=0x123):
    return IdStream(can_id, tuple(CanFrame(i * 0.01, can_id, 1, bytes([i % 256])) for i in range(n)))


frames_st = st.lists(
    st.tuples(
        st.integers(0, 10**6),
        st.integers(0, 0x7FF),
        st.binary(min_size=0, max_size=8),
    ),
    max_size=40,
).map(
    lambda rows: [
        CanFrame(t / 1000, i, len(p), p) for t, i, p in sorted(rows, key=lambda r: r[0])
    ]
)


class TestParseLog:
    def test_single_frame(self):
        (f,) = parse_log(io.StringIO("0.000,1F7,8,0011223344556677\n"))
        assert f == CanFrame(0.0, 0x1F7, 8, bytes.fromhex("0011223344556677"))

    def test_empty_input(self):
        assert parse_log(io.StringIO("")) == []

    def test_comments_and_blank_lines_skipped(self):
        text = "# capture\n\n0.5,010,2,ABCD\n"
        assert parse_log(text.splitlines()) == [CanFrame(0.5, 0x10, 2, b"\xab\xcd")]

    @pytest.mark.parametrize(
        "line, exc",
        [
            ("0.0,ZZZ,8,00", InvalidId),
            ("0.0,800,0,", InvalidId),
            ("0.0,123,8", MalformedLine),
            ("0.0,123,8,00,11", MalformedLine),
            ("abc,123,1,00", MalformedLine),
            ("0.0,123,2,00", DlcMismatch),
            ("0.0,123,9,000000000000000000", DlcMismatch),
        ],
    )
    def test_errors(self, line, exc):
        with pytest.raises(exc):
            parse_log([line])

    def test_backwards_timestamp_rejected(self):
        with pytest.raises(MalformedLine):
            parse_log(["1.0,001,0,", "0.5,001,0,"])

    @given(frames_st)
    def test_round_trip(self, frames):
        text = serialize_log(frames)
        assert parse_log(io.StringIO(text)) == frames
        assert serialize_log(parse_log(io.StringIO(text))) == text

    def test_group_by_id_preserves_order(self):
        frames = parse_log(["0.0,002,1,01", "0.1,001,1,02", "0.2,002,1,03"])
        streams = group_by_id(frames)
        assert list(streams) == [1, 2]
        assert [f.payload for f in streams[2].frames] == [b"\x01", b"\x03"]


class TestSynthesize:
    def _spec(self, seed=0, duration=1.0):
        return TrafficSpec(
            [
                IdTraffic(
                    0x0DE,
                    0.01,
                    [
                        PlantedSignal(0, 8, SignalClass.COUNTER),
                        PlantedSignal(8, 16, SignalClass.PHYSICAL, step=40),
                        PlantedSignal(56, 8, SignalClass.CHECKSUM),
                    ],
                )
            ],
            duration,
            seed,
        )

    def test_frame_count_from_period(self):
        assert len(synthesize_traffic(self._spec())) == 100

    def test_deterministic(self):
        a = serialize_log(synthesize_traffic(self._spec(seed=3)))
        b = serialize_log(synthesize_traffic(self._spec(seed=3)))
        assert a == b
        assert a != serialize_log(synthesize_traffic(self._spec(seed=4)))

    def test_counter_increments_mod_256(self):
        frames = synthesize_traffic(self._spec(duration=5.0))
        vals = [get_field(f.payload, 0, 8) for f in frames]
        assert all((b - a) % 256 == 1 for a, b in zip(vals, vals[1:]))

    def test_checksum_is_byte_sum(self):
        for f in synthesize_traffic(self._spec()):
            assert f.payload[7] == sum(f.payload[:7]) & 0xFF

    def test_physical_walk_bounded(self):
        frames = synthesize_traffic(self._spec(duration=5.0))
        vals = [get_field(f.payload, 8, 16) for f in frames]
        assert all(abs(b - a) <= 40 for a, b in zip(vals, vals[1:]))

    def test_constants_stay_constant(self):
        frames = synthesize_traffic(self._spec())
        assert len({get_field(f.payload, 24, 32) for f in frames}) == 1

    def test_timestamps_non_decreasing_across_ids(self):
        spec = self._spec()
        spec.ids.append(IdTraffic(0x0FB, 0.013, [PlantedSignal(0, 4, SignalClass.COUNTER)], jitter=0.002))
        ts = [f.timestamp for f in synthesize_traffic(spec)]
        assert ts == sorted(ts)

    def test_empty_spec(self):
        with pytest.raises(EmptySpec):
            synthesize_traffic(TrafficSpec([], 1.0))


class TestWindows:
    @pytest.mark.parametrize("n, stride, count", [(100, 1, 61), (39, 1, 0), (40, 1, 1), (80, 40, 2), (0, 1, 0)])
    def test_counts(self, n, stride, count):
        assert len(windows(_stream(n), stride)) == count

    def test_disjoint_with_stride_40(self):
        a, b = windows(_stream(80), 40)
        assert a.frames[-1].timestamp < b.frames[0].timestamp

    @given(st.integers(0, 200))
    def test_verbatim_slices(self, n):
        s = _stream(n)
        ws = windows(s)
        assert len(ws) == max(0, n - 39)
        for w in ws:
            assert len(w.frames) == 40
            assert w.frames == s.frames[w.start_index : w.start_index + 40]

    def test_label_is_first_attacked_frame(self):
        labels = ["clean"] * 50
        labels[45] = "DROP"
        labels[46] = "MASQ_FUZZ"
        ws = windows(_stream(50), 1, labels)
        assert ws[0].label == "clean"
        assert ws[6].label == "DROP"

    def test_invalid_stride(self):
        with pytest.raises(ValueError):
            windows(_stream(50), 0)


class TestPartition:
    def test_table_sizes(self):
        assert partition_sizes(724_350, 50) == [14_487] * 50
        assert partition_sizes(724_350, 1) == [724_350]

    def test_remainder_to_lowest_ids(self):
        assert [len(p.frames) for p in partition(_stream(10), 3)] == [4, 3, 3]

    def test_zero_vehicles(self):
        with pytest.raises(ZeroVehicles):
            partition(_stream(10), 0)

    @given(st.integers(0, 300), st.integers(1, 60))
    def test_cover_and_balance(self, n, v):
        s = _stream(n)
        parts = partition(s, v)
        assert [p.vehicle_id for p in parts] == list(range(v))
        assert sum((p.frames for p in parts), ()) == s.frames
        sizes = [len(p.frames) for p in parts]
        assert max(sizes) - min(sizes) <= 1
        assert sizes == sorted(sizes, reverse=True)

    @settings(max_examples=50)
    @given(st.integers(0, 1000))
    def test_split_fractions_cover(self, n):
        slices = split_fractions(n, [0.6, 0.2, 0.2])
        assert slices[0].start == 0 and slices[-1].stop == n
        assert all(a.stop == b.start for a, b in zip(slices, slices[1:]))
