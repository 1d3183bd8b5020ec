import pytest

from canfed import plotting

PNG = b"\x89PNG\r\n\x1a\n"

DETECTION = [
    {"id": "0DE", "mode": "centralized", "dr": 0.93, "fpr": 0.01},
    {"id": "0DE", "mode": "federated", "dr": 0.88, "fpr": 0.04},
    {"id": "116", "mode": "federated", "dr": None, "fpr": 0.0},
]
OVERHEAD = [{"id": "0DE", "dl_mib": 37.34, "ul_mib": 36.98}, {"id": "0EE", "dl_mib": 15.29, "ul_mib": 14.94}]
LOSSES = {(0x0DE, "centralized"): [0.1, 0.05, 0.02], (0x0DE, "federated"): [0.1, 0.07, 0.04, 0.03]}


@pytest.mark.parametrize(
    "draw, data",
    [
        (plotting.detection_figure, DETECTION),
        (plotting.loss_figure, LOSSES),
        (plotting.overhead_figure, OVERHEAD),
    ],
)
def test_figures_are_reproducible_pngs(tmp_path, draw, data):
    a, b = tmp_path / "a" / "fig.png", tmp_path / "b.png"
    draw(data, a)
    draw(data, b)
    assert a.read_bytes().startswith(PNG)
    assert a.read_bytes() == b.read_bytes()
