import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import pair_metrics, random_label_case
from videofer.core import InvalidInputError
from videofer.dataio import VideoAnnotation
from videofer.inference import records_for_video, write_predictions
from videofer.metrics import (
    MetricReport,
    MissingPredictionsError,
    confusion_matrix,
    e_total,
    evaluate_files,
    macro_f1,
    parse_report_text,
    total_accuracy,
)


def test_diagonal_counts():
    cm = confusion_matrix([0, 0], [0, 0])
    assert cm[0, 0] == 2
    assert cm.sum() == 2


def test_invalid_truth_is_skipped():
    assert confusion_matrix([-1, 3], [2, 3]).sum() == 1


def test_invalid_prediction_rejected():
    with pytest.raises(InvalidInputError):
        confusion_matrix([0, 1], [0, -1])


def test_length_mismatch_rejected():
    with pytest.raises(InvalidInputError):
        confusion_matrix([0, 1], [0])


def test_confusion_matches_pair_counting():
    rng = np.random.default_rng(0)
    t = rng.integers(-1, 7, size=100)
    p = rng.integers(0, 7, size=100)
    cm_oracle, *_ = pair_metrics(t, p)
    np.testing.assert_array_equal(confusion_matrix(t, p), cm_oracle)


def test_macro_f1_hand_example():
    cm = confusion_matrix([0, 0, 1, 1, 2], [0, 1, 1, 1, 2])
    rep = MetricReport.from_confusion(cm)
    np.testing.assert_allclose(rep.f1, [2 / 3, 0.8, 1, 0, 0, 0, 0], rtol=0, atol=1e-15)
    assert macro_f1(cm) == pytest.approx((2 / 3 + 0.8 + 1) / 7, abs=1e-15)
    assert macro_f1(cm) == pytest.approx(0.35238, abs=5e-6)


def test_perfect_predictions():
    y = list(range(7)) * 3
    cm = confusion_matrix(y, y)
    assert macro_f1(cm) == 1.0
    assert total_accuracy(cm) == 1.0


def test_absent_class_contributes_zero():
    cm = confusion_matrix([0, 1], [0, 1])
    rep = MetricReport.from_confusion(cm)
    assert rep.f1[2:].tolist() == [0.0] * 5
    assert rep.macro_f1 == pytest.approx(2 / 7, abs=1e-15)


def test_accuracy_four_of_five():
    assert total_accuracy(confusion_matrix([0, 1, 2, 3, 4], [0, 1, 2, 3, 0])) == 0.8


def test_empty_matrix_rejected():
    with pytest.raises(InvalidInputError):
        macro_f1(np.zeros((7, 7), dtype=int))
    with pytest.raises(InvalidInputError):
        total_accuracy(confusion_matrix([-1], [0]))


@pytest.mark.parametrize("f1,acc,want", [(0.4133, 0.6216, 0.482039), (0.30, 0.50, 0.366), (1.0, 1.0, 1.0)])
def test_e_total_values(f1, acc, want):
    assert e_total(f1, acc) == pytest.approx(want, abs=1e-12)


def test_e_total_matches_rounded_reference_values():
    assert abs(e_total(0.4133, 0.6216) - 0.4821) <= 5e-4
    assert abs(e_total(0.30, 0.50) - 0.36) <= 7e-3


@pytest.mark.parametrize("f1,acc", [(-0.1, 0.5), (0.5, 1.01), (float("nan"), 0.5)])
def test_e_total_range_checked(f1, acc):
    with pytest.raises(InvalidInputError):
        e_total(f1, acc)


def test_metrics_match_oracle_on_random_cases():
    rng = np.random.default_rng(1)
    for _ in range(200):
        t, p = random_label_case(rng)
        cm = confusion_matrix(t, p)
        _, f1s, mf1, acc = pair_metrics(t, p)
        rep = MetricReport.from_confusion(cm)
        np.testing.assert_allclose(rep.f1, [float(x) for x in f1s], rtol=0, atol=1e-12)
        assert abs(rep.macro_f1 - float(mf1)) <= 1e-12
        assert abs(rep.total_accuracy - float(acc)) <= 1e-12
        assert rep.e_total == e_total(rep.macro_f1, rep.total_accuracy)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(-1, 6), st.integers(0, 6)), min_size=1, max_size=50), st.randoms())
def test_joint_shuffle_invariance_and_ranges(pairs, rnd):
    if all(t == -1 for t, _ in pairs):
        pairs = [(0, pairs[0][1])] + pairs[1:]
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    a = MetricReport.from_labels(*zip(*pairs))
    b = MetricReport.from_labels(*zip(*shuffled))
    assert a.as_dict() == b.as_dict()
    for v in (a.macro_f1, a.total_accuracy, a.e_total):
        assert 0.0 <= v <= 1.0


def test_report_text_round_trip():
    rep = MetricReport.from_labels([0, 0, 1, 1, 2], [0, 1, 1, 1, 2])
    back = parse_report_text(rep.to_text())
    assert back["macro_f1"] == rep.macro_f1
    assert back["e_total"] == rep.e_total
    assert back["f1_class_1"] == rep.f1[1]
    assert "E_total" in rep.render()


# -- file evaluation --------------------------------------------------------------

def _write_truth_as_predictions(anns, path, override=None):
    records = []
    for ann in anns:
        labels = np.where(ann.labels < 0, 0, ann.labels)
        if override is not None:
            labels = np.full_like(labels, override)
        records.extend(records_for_video(ann.video_id, np.eye(7)[labels]))
    write_predictions(records, path)


def test_evaluate_files_perfect(tmp_path):
    anns = [VideoAnnotation("a", np.array([0, 1, -1, 2]), "."), VideoAnnotation("b", np.array([3, 4, 5, 6]), ".")]
    _write_truth_as_predictions(anns, tmp_path / "p.csv")
    rep = evaluate_files(tmp_path / "p.csv", anns)
    assert (rep.macro_f1, rep.total_accuracy, rep.e_total) == (1.0, 1.0, 1.0)


def test_evaluate_files_constant_model(tmp_path):
    anns = [VideoAnnotation(f"v{c}", np.full(3, c), ".") for c in range(7)]
    _write_truth_as_predictions(anns, tmp_path / "p.csv", override=4)
    rep = evaluate_files(tmp_path / "p.csv", anns)
    assert rep.total_accuracy == pytest.approx(1 / 7, abs=1e-15)
    assert rep.e_total == e_total(rep.macro_f1, rep.total_accuracy)


def test_evaluate_files_reads_split_directory(tmp_path):
    from videofer.dataio import write_annotation_file

    anns = [VideoAnnotation("a", np.array([0, 1, 1]), "."), VideoAnnotation("b", np.array([2, -1]), ".")]
    (tmp_path / "val").mkdir()
    for ann in anns:
        write_annotation_file(ann, tmp_path / "val" / f"{ann.video_id}.txt")
    _write_truth_as_predictions(anns, tmp_path / "p.csv")
    assert evaluate_files(tmp_path / "p.csv", tmp_path / "val").total_accuracy == 1.0


def test_evaluate_files_lists_missing_frames(tmp_path):
    anns = [VideoAnnotation("a", np.zeros(20, dtype=np.int64), ".")]
    write_predictions(records_for_video("a", np.eye(7)[[0, 0]]), tmp_path / "p.csv")
    with pytest.raises(MissingPredictionsError) as err:
        evaluate_files(tmp_path / "p.csv", anns)
    msg = str(err.value)
    assert msg.startswith("18 annotated frames")
    assert msg.count("a:") == 10


def test_missing_invalid_frames_are_fine(tmp_path):
    anns = [VideoAnnotation("a", np.array([1, 1, -1]), ".")]
    write_predictions(records_for_video("a", np.eye(7)[[1, 1]]), tmp_path / "p.csv")
    assert evaluate_files(tmp_path / "p.csv", anns).total_accuracy == 1.0
