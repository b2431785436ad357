import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecgda.evaluate import (MetricsReport, confusion_matrix, emit_report, f1_score, metrics_from_confusion,
                            read_confusion_csv)

# Published Se / PPV pairs with their F1, per setting and class.
PUBLISHED = {
    "incart_cross_domain": {"N": (91.08, 92.27, 91.67), "V": (72.98, 87.69, 79.66),
                            "S": (47.67, 40.65, 43.88), "F": (33.77, 8.80, 13.96)},
    "incart_cross_channel": {"N": (86.38, 92.11, 89.15), "V": (77.90, 71.13, 74.36),
                             "S": (58.79, 38.97, 46.87), "F": (6.71, 7.09, 6.90)},
    "estdb": {"N": (89.61, 81.12, 85.16), "V": (65.28, 95.02, 77.39),
              "S": (24.84, 19.59, 21.90), "F": (10.77, 5.36, 7.16)},
}


@pytest.mark.parametrize("setting,cls", [(s, c) for s in PUBLISHED for c in "NVSF"])
def test_f1_matches_published_values(setting, cls):
    se, ppv, f1 = PUBLISHED[setting][cls]
    assert abs(f1_score(se, ppv) - f1) <= 0.01


def test_f1_edge_cases():
    assert f1_score(None, 50.0) is None
    assert f1_score(40.0, None) == 0.0
    assert f1_score(0.0, 0.0) == 0.0
    assert f1_score(100.0, 100.0) == 100.0


def test_confusion_matrix_orientation():
    cm = confusion_matrix([0, 0, 1, 3], [0, 2, 1, 1])
    assert cm[0, 2] == 1 and cm[3, 1] == 1 and cm.sum() == 4
    with pytest.raises(ValueError, match="out of range"):
        confusion_matrix([-1], [0])
    with pytest.raises(ValueError, match="shapes"):
        confusion_matrix([0, 1], [0])


def test_metrics_from_confusion_hand_example():
    cm = np.array([[8, 1, 1, 0], [0, 4, 0, 0], [2, 0, 2, 0], [0, 0, 0, 0]])
    rep = metrics_from_confusion(cm)
    assert rep.se["N"] == pytest.approx(80.0) and rep.ppv["N"] == pytest.approx(80.0)
    assert rep.ppv["V"] == pytest.approx(80.0) and rep.se["V"] == 100.0
    assert rep.se["F"] is None and rep.ppv["F"] is None and rep.f1["F"] is None
    assert rep.overall_accuracy == pytest.approx(14 / 18 * 100)
    assert rep.ppv["S"] == pytest.approx(200 / 3)
    assert rep.macro_f1 == pytest.approx(np.mean([80.0, 2 * 100 * 80 / 180, 2 * 50 * (200 / 3) / (50 + 200 / 3)]))


def test_class_never_predicted_has_zero_f1():
    rep = metrics_from_confusion(np.array([[5, 0, 0, 0], [3, 0, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]]))
    assert rep.ppv["V"] is None and rep.f1["V"] == 0.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=80))
def test_metrics_bounds_and_consistency(pairs):
    y, p = map(np.array, zip(*pairs))
    rep = metrics_from_confusion(confusion_matrix(y, p))
    for c in "NVSF":
        for v in (rep.se[c], rep.ppv[c], rep.f1[c]):
            assert v is None or 0.0 <= v <= 100.0
        if rep.se[c] is not None and rep.ppv[c] is not None:
            assert min(rep.se[c], rep.ppv[c]) - 1e-9 <= rep.f1[c] <= max(rep.se[c], rep.ppv[c]) + 1e-9
    assert rep.overall_accuracy == pytest.approx(100 * np.mean(y == p))


def test_report_files_roundtrip(tmp_path):
    cm = np.array([[8, 1, 1, 0], [0, 4, 0, 0], [2, 0, 2, 0], [0, 0, 0, 3]])
    rep = metrics_from_confusion(cm, "tgt", "adapted", augmented=False)
    paths = emit_report(rep, cm, tmp_path)
    assert [p.name for p in paths] == ["metrics.json", "confusion.csv"]
    data = json.loads(paths[0].read_text())
    assert data["model"] == "adapted" and data["augmented"] is False
    assert data["classes"]["N"] == {"se": 80.0, "ppv": 80.0, "f1": 80.0}
    back = MetricsReport.from_dict(data)
    assert back.to_json() == rep.to_json()
    np.testing.assert_array_equal(read_confusion_csv(paths[1]), cm)
    assert paths[1].read_text().splitlines()[0] == ",N,V,S,F"


def test_plot_is_written(tmp_path):
    pytest.importorskip("matplotlib")
    cm = np.eye(4, dtype=np.int64) * 5
    paths = emit_report(metrics_from_confusion(cm), cm, tmp_path, plot=True, prefix="b_")
    assert paths[-1].name == "b_confusion.png" and paths[-1].stat().st_size > 0
