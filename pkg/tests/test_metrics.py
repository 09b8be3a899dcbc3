import numpy as np
import pandas as pd
import pytest

from app.core.errors import DimensionError, InputError
from app.core.metrics import (
    accuracy,
    average_precision,
    evaluate,
    format_stats,
    map_score,
    render_report,
    run_stats,
    write_ap_csv,
)


def _brute_force_ap(scores, labels):
    precisions = []
    for s in scores[labels == 1]:
        above = scores >= s
        precisions.append((labels[above] == 1).sum() / above.sum())
    return float(np.mean(precisions))


class TestAveragePrecision:
    def test_hand_computed_case(self):
        # positives at ranks 1 and 3: (1/1 + 2/3) / 2
        ap = average_precision([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0])
        assert ap == pytest.approx(0.8333333, abs=1e-6)

    @pytest.mark.parametrize("k", [1, 2, 5, 10])
    def test_single_positive_at_rank_k(self, k):
        scores = np.linspace(1.0, 0.0, 10)
        labels = np.zeros(10, dtype=int)
        labels[k - 1] = 1
        assert average_precision(scores, labels) == pytest.approx(1.0 / k)

    def test_perfect_ranking(self):
        assert average_precision([0.9, 0.8, 0.1], [1, 1, 0]) == pytest.approx(1.0)

    def test_matches_brute_force_oracle(self):
        r = np.random.default_rng(11)
        for _ in range(200):
            n = int(r.integers(2, 40))
            scores = r.random(n)
            labels = (r.random(n) < 0.3).astype(int)
            if labels.sum() == 0:
                labels[int(r.integers(0, n))] = 1
            assert average_precision(scores, labels) == pytest.approx(_brute_force_ap(scores, labels), abs=1e-12)

    def test_ties_keep_index_order(self):
        # equal scores: the earlier index ranks first
        assert average_precision([0.5, 0.5], [1, 0]) == pytest.approx(1.0)
        assert average_precision([0.5, 0.5], [0, 1]) == pytest.approx(0.5)

    def test_no_positives_rejected(self):
        with pytest.raises(InputError):
            average_precision([0.1, 0.2], [0, 0])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            average_precision([0.1, 0.2, 0.3], [0, 1])


class TestMapScore:
    def test_skips_classes_without_positives(self):
        scores = np.array([[0.9, 0.1, 0.3], [0.2, 0.8, 0.4]])
        labels = np.array([[1, 0, 0], [0, 1, 0]])
        result = map_score(scores, labels)
        assert result.skipped_classes == [2]
        assert result.per_class_ap[2] is None
        assert result.map == pytest.approx(1.0)
        assert result.n_samples == 2

    def test_column_permutation_invariance(self, rng):
        scores = rng.random((30, 6))
        labels = (rng.random((30, 6)) < 0.4).astype(int)
        labels[0] = 1
        perm = rng.permutation(6)
        a = map_score(scores, labels)
        b = map_score(scores[:, perm], labels[:, perm])
        assert b.map == pytest.approx(a.map, abs=1e-12)
        assert b.per_class_ap == pytest.approx([a.per_class_ap[p] for p in perm])

    def test_matrix_shape_mismatch(self):
        with pytest.raises(DimensionError):
            map_score(np.zeros((3, 2)), np.zeros((3, 3)))

    def test_evaluate_adds_accuracy_for_single_label(self):
        scores = np.array([[0.7, 0.2, 0.1], [0.1, 0.3, 0.6], [0.5, 0.4, 0.1]])
        labels = np.eye(3, dtype=int)[[0, 2, 1]]
        single = evaluate(scores, labels, multi_label=False)
        assert single.accuracy == pytest.approx(2 / 3)
        assert evaluate(scores, labels, multi_label=True).accuracy is None


class TestAccuracy:
    def test_ties_resolve_to_lowest_index(self):
        logits = np.array([[1.0, 1.0, 0.0]])
        assert accuracy(logits, [0]) == 1.0
        assert accuracy(logits, [1]) == 0.0

    def test_rate(self):
        logits = np.array([[0.1, 0.9], [0.8, 0.2], [0.3, 0.7], [0.6, 0.4]])
        assert accuracy(logits, [1, 0, 0, 0]) == pytest.approx(0.75)

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            accuracy(np.zeros((2, 3)), [0])


def test_run_stats_and_format():
    mean, std = run_stats([0.346, 0.348])
    assert mean == pytest.approx(0.347)
    assert std == pytest.approx(0.001)
    assert format_stats(mean, std) == "0.347±0.001"
    assert run_stats([0.5]) == (0.5, 0.0)
    with pytest.raises(InputError):
        run_stats([])


def test_ap_csv_and_report(tmp_path):
    scores = np.array([[0.9, 0.1, 0.3], [0.2, 0.8, 0.4]])
    labels = np.array([[1, 0, 0], [0, 1, 0]])
    result = map_score(scores, labels)
    path = write_ap_csv(result, tmp_path / "ap.csv", ["dog", "cat", "bird"])
    frame = pd.read_csv(path)
    assert list(frame.columns) == ["class_index", "label", "ap", "skipped"]
    assert list(frame["label"]) == ["dog", "cat", "bird"]
    assert frame["ap"].iloc[0] == pytest.approx(1.0)
    assert np.isnan(frame["ap"].iloc[2])
    assert bool(frame["skipped"].iloc[2]) is True

    report = render_report(result, checkpoint="a.astc")
    assert "mAP: 1.000000" in report
    assert "skipped_classes: 2" in report
    assert report.splitlines()[-1] == "checkpoint: a.astc"
