import csv
import json

import numpy as np
import pytest
import yaml

from canfed.attacks import CLEAN, parse_labels
from canfed.candata import IdTraffic, PlantedSignal, TrafficSpec, serialize_log, synthesize_traffic
from canfed import experiment
from canfed.autoencoder import Threshold, flag
from canfed.cli import main
from canfed.config import load_config
from canfed.layout import SignalClass, read_layouts
from canfed.metrics import detection_report

TINY = {
    "seed": 3,
    "data": {"synthetic": {"ids": [0x0DE], "frames": 3000}},
    "attacks": {"kinds": ["MASQ_FUZZ", "MASQ_REPLAY"], "validation_per_kind": 2, "test_per_kind": 2},
    "model": {"enc_hidden": 4, "latent": 2, "dec_hidden": 4, "train_stride": 3},
    "federation": {"vehicles": 2, "max_rounds": 2},
    "optimizer": {"lr": 0.01},
}


@pytest.fixture
def config(tmp_path):
    def write(extra=None, name="exp.yaml"):
        raw = {**TINY, "out": str(tmp_path / "out")}
        for key, value in (extra or {}).items():
            raw[key] = value
        path = tmp_path / name
        path.write_text(yaml.safe_dump(raw))
        return path

    return write


def run(*argv):
    return main([str(a) for a in argv])


def tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestErrors:
    def test_missing_config(self, tmp_path, capsys):
        assert run("segment", "--config", tmp_path / "nope.yaml") == 2
        err = capsys.readouterr().err.strip().splitlines()
        assert len(err) == 1 and "config file not found" in err[0]

    def test_missing_log(self, config, tmp_path, capsys):
        path = config({"data": {"log": str(tmp_path / "missing.log")}})
        assert run("segment", "--config", path) == 2
        assert "input log not found" in capsys.readouterr().err

    def test_missing_manifest(self, config, tmp_path, capsys):
        path = config({"attacks": {**TINY["attacks"], "manifest": str(tmp_path / "m.csv")}})
        assert run("attack", "--config", path) == 2

    def test_evaluate_before_train(self, config, capsys):
        assert run("evaluate", "--config", config()) == 2
        assert "run train first" in capsys.readouterr().err

    def test_bad_config_exits_nonzero(self, config, capsys):
        assert run("segment", "--config", config({"federation": {"vehicels": 3}})) == 1
        err = capsys.readouterr().err.strip().splitlines()
        assert len(err) == 1 and "vehicels" in err[0]

    def test_unknown_id(self, config, capsys):
        assert run("segment", "--config", config({"ids": [0x7FF]})) == 1
        assert "7FF" in capsys.readouterr().err

    def test_usage(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2


class TestSegment:
    def test_recovers_planted_layout_from_log(self, tmp_path, capsys):
        planted = [
            PlantedSignal(0, 4, SignalClass.COUNTER),
            PlantedSignal(4, 12, SignalClass.PHYSICAL, step=3),
            PlantedSignal(16, 8, SignalClass.CONSTANT, value=0x5A),
            PlantedSignal(24, 16, SignalClass.PHYSICAL, step=40),
            PlantedSignal(40, 24, SignalClass.CONSTANT, value=7),
        ]
        spec = TrafficSpec([IdTraffic(0x123, 0.01, planted)], duration=40.0, seed=1)
        log_path = tmp_path / "drive.log"
        log_path.write_text(serialize_log(synthesize_traffic(spec)))
        assert run("segment", "--out", tmp_path / "o", "--set", f"data.log={log_path}") == 0
        (layout_path,) = (tmp_path / "o" / "layouts").iterdir()
        assert layout_path.name == "123.csv"
        got = read_layouts(layout_path)[0x123].signals
        assert [(s.start_bit, s.length_bits, s.kind) for s in got] == [(p.start_bit, p.length_bits, p.kind) for p in planted]

    def test_one_file_per_id(self, config, tmp_path, capsys):
        ids = [0x0DE, 0x0EE, 0x0FB, 0x0FC, 0x0FE, 0x0FF, 0x1F7, 0x1FB, 0x11C, 0x100, 0x104, 0x116, 0x192]
        path = config({"data": {"synthetic": {"ids": ids, "frames": 600, "profile": "random"}}})
        assert run("segment", "--config", path) == 0
        files = sorted(p.name for p in (tmp_path / "out" / "layouts").iterdir())
        assert files == sorted(f"{i:03X}.csv" for i in ids)
        assert len(capsys.readouterr().out.splitlines()) == 13


class TestAttack:
    def test_manifest_regions(self, config, tmp_path):
        manifest = tmp_path / "m.csv"
        rows = [f"MASQ_FUZZ,0DE,{start},25,{i}" for i, start in enumerate(range(10, 500, 100))]
        manifest.write_text("\n".join(rows) + "\n")
        path = config({"attacks": {**TINY["attacks"], "manifest": str(manifest)}})
        assert run("attack", "--config", path) == 0
        labels = parse_labels((tmp_path / "out" / "attacks" / "0DE_test.labels").read_text())
        starts = [i for i, lab in enumerate(labels) if lab != CLEAN and (i == 0 or labels[i - 1] == CLEAN)]
        assert starts == list(range(10, 500, 100))
        assert sum(lab != CLEAN for lab in labels) == 5 * 25
        written = (tmp_path / "out" / "attacks" / "manifest.csv").read_text().splitlines()
        assert sum(line.startswith("test,") for line in written) == 5

    def test_deterministic(self, config, tmp_path):
        path = config()
        run("attack", "--config", path)
        first = tree(tmp_path / "out")
        run("attack", "--config", path)
        assert tree(tmp_path / "out") == first
        run("attack", "--config", path, "--seed", 99)
        assert tree(tmp_path / "out") != first


class TestTrainEvaluate:
    def test_centralized_equals_single_vehicle(self, config, tmp_path):
        fed = {**TINY["federation"], "vehicles": 1, "precision": "f64"}
        assert run("train", "--config", config({"federation": fed})) == 0
        models = tmp_path / "out" / "models"
        assert (models / "0DE_centralized.fcw").read_bytes() == (models / "0DE_federated.fcw").read_bytes()

    def test_fifty_vehicles_accepted(self, config, tmp_path):
        path = config({
            "data": {"synthetic": {"ids": [0x0DE], "frames": 12000}},
            "federation": {"vehicles": 50, "epochs": 1, "max_rounds": 1},
            "modes": ["federated"],
        })
        assert run("train", "--config", path) == 0
        header = (tmp_path / "out" / "history" / "0DE_federated.csv").read_text().splitlines()[0]
        assert header.endswith("loss_v49")

    def test_early_stop_history(self, config, tmp_path):
        fed = {**TINY["federation"], "max_rounds": 30, "patience": 2}
        path = config({"federation": fed, "optimizer": {"lr": 0.0}, "modes": ["federated"]})
        assert run("train", "--config", path) == 0
        rows = list(csv.DictReader((tmp_path / "out" / "history" / "0DE_federated.csv").open()))
        assert len(rows) < 30
        assert [r["stop"] for r in rows] == ["0"] * (len(rows) - 1) + ["1"]
        meta = json.loads((tmp_path / "out" / "models" / "0DE_federated.json").read_text())
        assert meta["stopped_early"] and meta["rounds"] == len(rows)

    def test_run_writes_reports_and_evaluate_is_idempotent(self, config, tmp_path, capsys):
        path = config()
        assert run("run", "--config", path) == 0
        printed = capsys.readouterr().out
        reports = tmp_path / "out" / "reports"
        for name in ("detection.csv", "detection.txt", "detection_by_kind.csv", "overhead.csv",
                     "overhead.txt", "detection.png", "loss.png", "overhead.png"):
            assert (reports / name).stat().st_size > 0
        assert printed.startswith((reports / "detection.txt").read_text())
        first = tree(tmp_path / "out")
        assert run("evaluate", "--config", path) == 0
        assert tree(tmp_path / "out") == first

    def test_rerun_byte_identical(self, config, tmp_path):
        path = config()
        assert run("run", "--config", path) == 0
        first = tree(tmp_path / "out")
        assert run("run", "--config", path) == 0
        assert tree(tmp_path / "out") == first

    def test_no_stray_temporaries(self, config, tmp_path):
        run("run", "--config", config())
        assert not [p for p in (tmp_path / "out").rglob("*") if p.name.endswith(".tmp")]


def test_separable_attacks_fully_detected():
    """A scorer that reconstructs the clean stream exactly makes every attacked window stand out."""
    cfg = load_config(None, [
        "data.synthetic={ids: [0x0DE], frames: 6000}",
        "attacks={kinds: [MASQ_FUZZ], test_per_kind: 6}",
    ])
    (data,) = experiment._prepared(cfg)
    x, labels = experiment.labelled_windows(data.test_attacked, data.layout, data.norms, 1)
    clean = experiment.tensor(data.splits.test.frames, data.layout, data.norms, 1)
    errors = np.abs(x - clean).max(axis=(1, 2))
    rep = detection_report(flag(errors, Threshold(0.0, "fixed")), labels)
    assert rep.tp > 0 and rep.tn > 0
    assert (rep.dr, rep.fpr, rep.sequence_dr) == (1.0, 0.0, 1.0)
