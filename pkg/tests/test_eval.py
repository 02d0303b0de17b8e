import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from dronefuse.corpus import CorpusSpec, FeatureConfig
from dronefuse.errors import DiagnosticError, InvariantError, ParameterError
from dronefuse.eval import (METRIC_KEYS, SWEEP_HEADER, Confusion, SweepGenerator, SweepSpec, auroc,
                            confusion_matrix, confusions_from_predictions, metrics, oodd_accuracy,
                            read_sweep, rid_metrics, spearman, sweep, write_sweep)

HAND_CASES = [
    # (tp, tn, fp, fn) -> accuracy, precision, recall
    ((1, 1, 0, 0), (1.0, 1.0, 1.0)),
    ((0, 0, 1, 1), (0.0, 0.0, 0.0)),
    ((3, 4, 1, 2), (0.7, 0.75, 0.6)),
]


class TestMetrics:
    @pytest.mark.parametrize("counts,expected", HAND_CASES)
    def test_hand_examples(self, counts, expected):
        m = metrics(Confusion(*counts))
        assert (m["accuracy"], m["precision"], m["recall"]) == expected

    def test_zero_denominators_flagged(self):
        m = metrics(Confusion(tp=0, tn=5, fp=0, fn=0))
        assert m["accuracy"] == 1.0 and m["precision"] is None and m["recall"] is None

    def test_no_samples(self):
        with pytest.raises(ParameterError):
            metrics(Confusion(0, 0, 0, 0))

    @pytest.mark.parametrize("bad", [(-1, 0, 0, 0), (1.5, 0, 0, 0)])
    def test_counts_validated(self, bad):
        with pytest.raises(ParameterError):
            Confusion(*bad)

    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=60))
    @settings(max_examples=60, deadline=None)
    def test_counts_sum_to_sample_count(self, pairs):
        y_true, y_pred = map(np.array, zip(*pairs))
        for conf in confusions_from_predictions(y_true, y_pred, range(4)):
            assert conf.total == len(pairs)
        cm = confusion_matrix(y_true, y_pred, range(4))
        assert cm.sum() == len(pairs) and np.trace(cm) == np.sum(y_true == y_pred)

    def test_macro_average_skips_undefined(self):
        # class 2 never predicted: precision undefined, recall 0
        out = rid_metrics([0, 1, 2, 2], [0, 1, 1, 0], [0, 1, 2])
        assert out["accuracy"] == 0.5
        assert ("precision", 2) in out["undefined"]
        assert out["precision"] == pytest.approx((0.5 + 0.5) / 2)
        assert out["recall"] == pytest.approx((1 + 1 + 0) / 3)

    def test_audit_catches_disagreement(self, monkeypatch):
        import dronefuse.eval as ev
        monkeypatch.setattr(ev, "_recount", lambda t, p, c: [Confusion(0, 0, 0, 1)] * len(c))
        with pytest.raises(InvariantError):
            rid_metrics([0, 1], [0, 1], [0, 1])

    def test_shape_mismatch(self):
        with pytest.raises(ParameterError):
            rid_metrics([0, 1], [0], [0, 1])


class TestOodd:
    def test_all_below(self):
        assert oodd_accuracy([0.9, 0.1, 0.2], [False, True, True], tau=0.5) == 1.0

    def test_zero_threshold(self):
        assert oodd_accuracy([0.9, 0.1, 0.0], [False, True, True], tau=0.0) == 0.0

    def test_seven_of_ten(self):
        ood = [0.1] * 7 + [0.8] * 3
        scores = [0.95] + ood
        assert oodd_accuracy(scores, [False] + [True] * 10, tau=0.5) == 0.7

    @given(st.lists(st.floats(0, 1), min_size=2, max_size=40), st.floats(0, 1), st.floats(0, 1))
    @settings(max_examples=80, deadline=None)
    def test_non_decreasing_in_tau(self, scores, t1, t2):
        flags = np.arange(len(scores)) % 2 == 1
        lo, hi = sorted((t1, t2))
        assert oodd_accuracy(scores, flags, lo) <= oodd_accuracy(scores, flags, hi)

    def test_empty_ood(self):
        with pytest.raises(DiagnosticError):
            oodd_accuracy([0.5, 0.6], [False, False], 0.5)

    def test_empty_id(self):
        with pytest.raises(DiagnosticError):
            oodd_accuracy([0.5, 0.6], [True, True], 0.5)


class TestAuroc:
    def test_perfect_separation(self):
        assert auroc([0.9, 0.95, 0.1, 0.2], [False, False, True, True]) == 1.0

    def test_three_point_hand_case(self):
        assert auroc([0.9, 0.8, 0.7], [False, False, True]) == 1.0

    def test_all_tied(self):
        assert auroc([0.5] * 6, [False, True] * 3) == 0.5

    def test_identical_distributions_near_half(self):
        rng = np.random.default_rng(0)
        a = auroc(rng.random(4000), rng.random(4000) < 0.5)
        assert abs(a - 0.5) < 0.03

    @given(st.lists(st.integers(0, 20), min_size=2, max_size=50))
    @settings(max_examples=80, deadline=None)
    def test_matches_mann_whitney(self, raw):
        scores = np.array(raw, float)
        flags = np.arange(scores.size) % 3 == 0
        ind, ood = scores[~flags], scores[flags]
        u = stats.mannwhitneyu(ind, ood, alternative="two-sided").statistic
        assert auroc(scores, flags) == pytest.approx(u / (ind.size * ood.size), abs=1e-12)

    @given(st.lists(st.integers(-400, 400), min_size=2, max_size=40, unique=True))
    @settings(max_examples=60, deadline=None)
    def test_invariant_under_monotone_transform(self, raw):
        # grid spacing keeps exp() strictly increasing in floating point
        scores = np.array(raw) / 80.0
        flags = np.arange(scores.size) % 2 == 0
        base = auroc(scores, flags)
        assert auroc(np.exp(scores), flags) == pytest.approx(base, abs=1e-12)
        assert auroc(3.0 * scores - 1.0, flags) == pytest.approx(base, abs=1e-12)

    def test_degenerate(self):
        with pytest.raises(DiagnosticError):
            auroc([0.1, 0.2], [True, True])


@pytest.mark.filterwarnings("ignore::scipy.stats.ConstantInputWarning")
@given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 9)), min_size=3, max_size=40))
@settings(max_examples=60, deadline=None)
def test_spearman_matches_scipy(pairs):
    x, y = map(np.array, zip(*pairs))
    ours, ref = spearman(x, y), stats.spearmanr(x, y).statistic
    if math.isnan(ref):
        assert math.isnan(ours)
    else:
        assert ours == pytest.approx(ref, abs=1e-12)


class TestSweepSpec:
    @pytest.mark.parametrize("kwargs", [dict(axis="altitude", values=(1,)), dict(axis="snr", values=()),
                                        dict(axis="snr", values=(0,), repetitions=0)])
    def test_invalid(self, kwargs):
        with pytest.raises(ParameterError):
            SweepSpec(**kwargs)


@pytest.fixture(scope="module")
def tiny_generator():
    return SweepGenerator(base=CorpusSpec(seed=0), n_per_class=2, features=FeatureConfig())


@pytest.fixture(scope="module")
def tiny_model():
    from dronefuse.eval import TrainedModel
    from dronefuse.fusion_net import FusionNet, NetConfig, OodPolicy
    net = FusionNet(NetConfig(variant="tfi_only"), seed=0)
    net.eval()
    return TrainedModel(net, OodPolicy(0.5))


class TestSweep:
    def test_single_value_is_one_evaluation(self, tiny_model, tiny_generator):
        from dronefuse.eval import evaluate
        rows = sweep(SweepSpec("snr", (5.0,), seed=3), tiny_model, tiny_generator)
        assert len(rows) == 1
        test, ood = tiny_generator("snr", 5.0, 3)
        direct = evaluate(tiny_model, test, ood)
        assert {k: rows[0][k] for k in METRIC_KEYS} == {k: direct[k] for k in METRIC_KEYS}

    def test_rows_per_value_and_repetition(self, tiny_model, tiny_generator):
        rows = sweep(SweepSpec("distance", ("D00", "D10"), repetitions=2), tiny_model, tiny_generator)
        assert [(r["value"], r["seed"]) for r in rows] == [("D00", 0), ("D00", 1), ("D10", 0), ("D10", 1)]

    def test_deterministic(self, tiny_model, tiny_generator):
        spec = SweepSpec("los", ("S01",), seed=2)
        assert sweep(spec, tiny_model, tiny_generator) == sweep(spec, tiny_model, tiny_generator)

    @pytest.mark.parametrize("axis,value", [("snr", "loud"), ("distance", "D99"), ("los", "S02"),
                                            ("duration", 100), ("ood_type", 3)])
    def test_axis_value_mismatch(self, tiny_model, tiny_generator, axis, value):
        with pytest.raises(ParameterError):
            sweep(SweepSpec(axis, (value,)), tiny_model, tiny_generator)

    def test_csv_round_trip(self, tmp_path):
        rows = [{"axis": "snr", "value": -3.0, "seed": 0, "accuracy": 0.5, "precision": 0.25,
                 "recall": 1 / 3, "oodd_acc": 0.0, "auroc": float("nan")}]
        write_sweep(rows, tmp_path / "s.csv", tmp_path / "s.json", {"config_hash": "abc"})
        assert (tmp_path / "s.csv").read_text().splitlines()[0] == ",".join(SWEEP_HEADER)
        back = read_sweep(tmp_path / "s.csv")
        assert float(back[0]["recall"]) == 1 / 3 and math.isnan(float(back[0]["auroc"]))
        import json
        man = json.loads((tmp_path / "s.json").read_text())
        assert man["rows"] == 1 and man["config_hash"] == "abc"

    def test_wrong_header(self, tmp_path):
        (tmp_path / "x.csv").write_text("a,b\n1,2\n")
        with pytest.raises(ParameterError):
            read_sweep(tmp_path / "x.csv")
