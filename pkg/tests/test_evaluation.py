import math

import numpy as np
import pytest

from arascript.data import Document
from arascript.errors import ConfigError, DataFormatError
from arascript.evaluation import (AblationVariant, ConfusionMatrix,
                                  EvalReport, Metrics, SeedResult,
                                  VariantResult, evaluate, paired_ttest,
                                  read_confusion_csv, render_heatmap, report,
                                  shade_for, standard_variants, t_cdf)
from arascript.orthography import LanguageId


def uniform(c):
    return np.full(c, 1.0 / c)


def onehot(c, i):
    out = np.zeros(c)
    out[i] = 1.0
    return out


def test_all_correct_certain():
    preds = [(onehot(3, i % 3), i % 3) for i in range(9)]
    matrix, metrics = evaluate(preds)
    assert metrics.accuracy == 1.0
    assert metrics.log_loss == 0.0
    assert np.array_equal(matrix.counts, np.diag([3, 3, 3]))
    assert metrics.macro_f1 == 1.0


def test_uniform_predictor_balanced():
    preds = [(uniform(4), i % 4) for i in range(40)]
    matrix, metrics = evaluate(preds)
    # argmax of a uniform vector is class 0, so exactly 1/C is right
    assert metrics.accuracy == 0.25
    assert metrics.log_loss == pytest.approx(math.log(4), abs=1e-12)
    assert matrix.total == 40


def test_six_prediction_hand_fixture():
    # 2 classes, 6 docs, 2 errors: true/pred pairs
    # (0,0) (0,0) (0,1) (1,1) (1,1) (1,0), probabilities 0.8/0.6/0.7 mix
    preds = [
        (np.array([0.8, 0.2]), 0),
        (np.array([0.7, 0.3]), 0),
        (np.array([0.4, 0.6]), 0),   # error
        (np.array([0.3, 0.7]), 1),
        (np.array([0.2, 0.8]), 1),
        (np.array([0.6, 0.4]), 1),   # error
    ]
    matrix, metrics = evaluate(preds)
    assert matrix.counts.tolist() == [[2, 1], [1, 2]]
    assert metrics.accuracy == pytest.approx(4 / 6)
    # per-class precision and recall are both 2/3, so macro F1 = 2/3
    assert metrics.macro_precision == pytest.approx(2 / 3)
    assert metrics.macro_recall == pytest.approx(2 / 3)
    assert metrics.macro_f1 == pytest.approx(2 / 3)
    expected_ll = -np.mean(np.log([0.8, 0.7, 0.4, 0.7, 0.8, 0.4]))
    assert metrics.log_loss == pytest.approx(expected_ll, abs=1e-12)


def test_evaluate_permutation_invariant():
    rng = np.random.default_rng(3)
    preds = []
    for i in range(30):
        p = rng.dirichlet(np.ones(3))
        preds.append((p, int(rng.integers(3))))
    m1, s1 = evaluate(preds)
    order = rng.permutation(30)
    m2, s2 = evaluate([preds[int(i)] for i in order])
    assert np.array_equal(m1.counts, m2.counts)
    assert s1.log_loss == pytest.approx(s2.log_loss, abs=1e-12)


def test_evaluate_errors():
    with pytest.raises(DataFormatError):
        evaluate([])
    with pytest.raises(ConfigError):
        evaluate([(np.array([0.5, 0.2]), 0)])
    with pytest.raises(DataFormatError):
        evaluate([(uniform(2), 5)])


def test_matrix_accounting():
    preds = [(onehot(3, (i * 2) % 3), i % 3) for i in range(21)]
    matrix, metrics = evaluate(preds)
    assert matrix.counts.sum() == 21
    assert metrics.accuracy == pytest.approx(
        np.trace(matrix.counts) / 21, abs=1e-15)
    assert matrix.row_sums().tolist() == [7, 7, 7]


def test_t_cdf_against_frozen_references():
    # references computed with an independent statistics library
    refs = [
        (1, 1.0, 0.7500000000000002),
        (2, 2.0, 0.908248290463863),
        (5, 2.23606797749979, 0.9622065907891938),
        (10, 0.5, 0.6860531971285135),
        (30, 2.75, 0.9950000527365345),
        (5, -1.3, 0.12515031708533858),
        (99, 1.96, 0.9735964431245145),
    ]
    for df, x, expected in refs:
        assert t_cdf(x, df) == pytest.approx(expected, abs=1e-10)


def test_t_cdf_against_scipy_grid():
    scipy_stats = pytest.importorskip("scipy.stats")
    for df in (1, 3, 7, 20, 120):
        for x in (-4.0, -0.3, 0.0, 0.9, 2.5, 6.0):
            assert t_cdf(x, df) == pytest.approx(
                float(scipy_stats.t.cdf(x, df)), abs=1e-10)


def test_paired_ttest_identical_is_degenerate():
    res = paired_ttest([1, 0, 1], [1, 0, 1])
    assert res.degenerate and res.t is None and res.p is None


def test_paired_ttest_constant_difference_flagged():
    res = paired_ttest([1, 1, 1, 1], [0, 0, 0, 0])
    assert res.degenerate
    assert "infinite" in res.note


def test_paired_ttest_textbook_fixture():
    # differences (1,0,1,0,1,0): mean 0.5, sample sd sqrt(0.3),
    # t = 0.5 / (sqrt(0.3)/sqrt(6)) = sqrt(5)
    res = paired_ttest([1, 0, 1, 0, 1, 0], [0, 0, 0, 0, 0, 0])
    assert res.t == pytest.approx(math.sqrt(5), abs=1e-9)
    assert res.p == pytest.approx(0.0755868184216124, abs=1e-6)


def test_paired_ttest_symmetry():
    a = [1, 0, 1, 1, 0, 1, 0, 0]
    b = [0, 0, 1, 0, 1, 1, 0, 1]
    r1 = paired_ttest(a, b)
    r2 = paired_ttest(b, a)
    assert r1.t == pytest.approx(-r2.t, abs=1e-12)
    assert r1.p == pytest.approx(r2.p, abs=1e-12)


def test_paired_ttest_length_mismatch():
    with pytest.raises(DataFormatError):
        paired_ttest([1, 0], [1, 0, 1])
    with pytest.raises(DataFormatError):
        paired_ttest([1], [0])


def test_shade_monotone():
    shades = [shade_for(c, 10) for c in range(11)]
    greys = [int(s[1:3], 16) for s in shades]
    assert greys == sorted(greys, reverse=True)
    assert shade_for(0, 10) != shade_for(10, 10)
    assert shade_for(0, 0) == "#ffffff"


def _tiny_report():
    cm = {LanguageId.KURDISH: ConfusionMatrix(
        counts=np.array([[5, 1], [2, 4]]), class_names=["C1", "C2"])}
    metrics = Metrics(accuracy=0.75, macro_precision=0.75, macro_recall=0.75,
                      macro_f1=0.75, log_loss=0.4)
    seed_result = SeedResult(seed=0, metrics=metrics, confusions=cm,
                             perturbation_kl=0.01,
                             correctness=np.array([1.0, 0, 1, 1]))
    return EvalReport(
        variants=[VariantResult(variant=AblationVariant("full"),
                                per_seed=[seed_result])],
        ttests={}, test_doc_ids=["a", "b", "c", "d"])


def test_report_files_round_trip(tmp_path):
    files = report(_tiny_report(), tmp_path)
    names = {f.name for f in files}
    assert "metrics.csv" in names
    assert "ttests.csv" in names
    assert "curves.csv" in names
    assert "confusion_full_s0_kurdish.csv" in names
    assert "confusion_full_s0_kurdish.svg" in names
    loaded = read_confusion_csv(tmp_path / "confusion_full_s0_kurdish.csv")
    assert loaded.counts.tolist() == [[5, 1], [2, 4]]
    assert loaded.class_names == ["C1", "C2"]
    metrics_lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert metrics_lines[0].startswith("variant,seed,accuracy")
    assert any(line.startswith("full,mean") for line in metrics_lines)


def test_report_deterministic_bytes(tmp_path):
    report(_tiny_report(), tmp_path / "a")
    report(_tiny_report(), tmp_path / "b")
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes(), f.name


def test_heatmap_shading_matches_count_order(tmp_path):
    cm = ConfusionMatrix(counts=np.array([[9, 3], [0, 6]]),
                         class_names=["C1", "C2"])
    out = tmp_path / "h.svg"
    render_heatmap(cm, "fixture", out)
    svg = out.read_text()
    # rectangles carry explicit monotone grayscale fills
    for count in (9, 3, 0, 6):
        assert shade_for(count, 9) in svg
    greys = sorted({shade_for(c, 9) for c in (9, 3, 0, 6)})
    assert len(greys) == 4


def test_standard_variants_cover_spec_axes():
    names = {v.name for v in standard_variants()}
    assert {"scratch", "full", "single-tokenizer", "no-orth-mask",
            "no-consistency"} <= names


def test_confusion_matrix_validation():
    with pytest.raises(ConfigError):
        ConfusionMatrix(counts=np.zeros((2, 3)), class_names=["a", "b"])
    cm = ConfusionMatrix(counts=np.array([[3, 0], [1, 2]]),
                         class_names=["x", "y"])
    assert cm.accuracy == pytest.approx(5 / 6)
