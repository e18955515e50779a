import csv

import numpy as np
import pytest

from vimkit.data import Item, LabeledDataset
from vimkit.evaluation import (
    COMPLEXITY_HEADER,
    METRICS_HEADER,
    PredictionsError,
    build_report,
    confusion,
    count_flops,
    count_params,
    emit_report,
    encoder_flops,
    flops_breakdown,
    matmul_flops,
    metrics,
    roc_auc_binary,
    roc_auc_ovr,
    scan_flops,
    score_predictions_file,
)
from vimkit.tensor import Tensor
from vimkit.vim_model import HEAD_ONLY, VimConfig, VimModel, set_trainable


# -- independent oracles -------------------------------------------------------------


def brute_force_metrics(y_true, y_pred, k):
    """Per-sample TP/FP/TN/FN tallies in plain Python, weighted by class support."""
    n = len(y_true)
    out = {"precision": 0.0, "recall": 0.0, "f1": 0.0, "specificity": 0.0}
    for c in range(k):
        tp = fp = tn = fn = 0
        for t, p in zip(y_true, y_pred):
            if t == c and p == c:
                tp += 1
            elif t != c and p == c:
                fp += 1
            elif t == c and p != c:
                fn += 1
            else:
                tn += 1
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        spec = tn / (tn + fp) if tn + fp else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        w = (tp + fn) / n
        out["precision"] += w * prec
        out["recall"] += w * rec
        out["f1"] += w * f1
        out["specificity"] += w * spec
    out["accuracy"] = sum(int(t == p) for t, p in zip(y_true, y_pred)) / n
    return out


def pair_count_auc(scores, positive):
    pos = [s for s, y in zip(scores, positive) if y]
    neg = [s for s, y in zip(scores, positive) if not y]
    wins = 0.0
    for a in pos:
        for b in neg:
            wins += 1.0 if a > b else 0.5 if a == b else 0.0
    return wins / (len(pos) * len(neg))


# -- confusion / metrics ---------------------------------------------------------


def test_confusion_examples():
    np.testing.assert_array_equal(confusion([0, 1, 2], [0, 1, 2], 3).counts, np.eye(3))
    cm = confusion([0, 0, 1, 2], [0, 1, 1, 2], 3)
    np.testing.assert_array_equal(cm.counts, [[1, 1, 0], [0, 1, 0], [0, 0, 1]])
    assert not confusion([], [], 4).counts.any()


def test_confusion_label_range():
    with pytest.raises(ValueError):
        confusion([0, 3], [0, 1], 3)


def test_metrics_hand_matrix():
    m = metrics(confusion([0, 0, 1, 2], [0, 1, 1, 2], 3))
    assert m["accuracy"] == 0.75
    assert m["per_class"]["specificity"][1] == pytest.approx(2 / 3, abs=1e-15)
    assert m["sensitivity"] == m["recall"]


def test_metrics_perfect_on_158():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 6, 158)
    m = metrics(confusion(y, y, 6))
    for key in ("accuracy", "precision", "recall", "f1", "specificity", "sensitivity"):
        assert m[key] == 1.0


def test_metrics_empty():
    with pytest.raises(ValueError):
        metrics(confusion([], [], 3))


def test_metrics_match_brute_force_1000():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        k = int(rng.integers(2, 9))
        m_len = int(rng.integers(1, 60))
        y_true = rng.integers(0, k, m_len).tolist()
        y_pred = rng.integers(0, k, m_len).tolist()
        got = metrics(confusion(y_true, y_pred, k))
        ref = brute_force_metrics(y_true, y_pred, k)
        worst = max(worst, max(abs(got[key] - ref[key]) for key in ref))
        assert got["accuracy"] == ref["accuracy"]
    assert worst <= 1e-12


# -- AUC -------------------------------------------------------------------------


def test_auc_examples():
    assert roc_auc_binary([0.9, 0.8, 0.3, 0.2], [1, 1, 0, 0]) == 1.0
    assert roc_auc_binary([0.9, 0.8, 0.3, 0.2], [1, 0, 1, 0]) == 0.75
    assert roc_auc_binary([0.4] * 6, [1, 0, 1, 0, 0, 0]) == 0.5


def test_auc_single_class_is_error():
    with pytest.raises(ValueError):
        roc_auc_binary([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        roc_auc_ovr(np.full((4, 3), 1 / 3), [1, 1, 1, 1])


def test_auc_absent_class_skipped(caplog):
    scores = np.array([[0.8, 0.1, 0.1], [0.2, 0.7, 0.1], [0.6, 0.3, 0.1]])
    with caplog.at_level("WARNING"):
        macro, per = roc_auc_ovr(scores, [0, 1, 0])
    assert set(per) == {0, 1} and "class 2" in caplog.text
    assert macro == pytest.approx(np.mean([per[0], per[1]]))


def test_auc_matches_pair_counting():
    rng = np.random.default_rng(5)
    for _ in range(200):
        m = int(rng.integers(2, 201))
        k = int(rng.integers(2, 7))
        # coarse scores force plenty of ties
        scores = rng.integers(0, 8, size=(m, k)) / 8.0
        y = rng.integers(0, k, m)
        if len(set(y.tolist())) < 2:
            continue
        _, per = roc_auc_ovr(scores, y)
        for c, v in per.items():
            assert abs(v - pair_count_auc(scores[:, c].tolist(), (y == c).tolist())) <= 1e-9


def test_auc_monotone_invariance(rng):
    scores = rng.normal(size=(80, 4))
    y = rng.integers(0, 4, 80)
    base, _ = roc_auc_ovr(scores, y)
    assert roc_auc_ovr(np.exp(scores), y)[0] == pytest.approx(base, abs=1e-12)
    assert roc_auc_ovr(3.0 * scores - 7.0, y)[0] == pytest.approx(base, abs=1e-12)


# -- complexity ------------------------------------------------------------------


def test_count_params_small():
    assert count_params([("w", Tensor(np.zeros((3, 4)))), ("b", Tensor(np.zeros(4)))]) == 16


def test_count_params_ignores_freezing():
    model = VimModel(VimConfig(image_size=16, patch_size=8, embed_dim=8, depth=1))
    n = count_params(model)
    set_trainable(model, HEAD_ONLY)
    assert count_params(model) == n


def test_flop_rule_examples():
    assert matmul_flops(2, 3, 4) == 48
    assert scan_flops(10, 4, 2) == 480


def test_encoder_flops_scale_with_tokens():
    small = VimConfig(image_size=32, patch_size=8)
    big = VimConfig(image_size=64, patch_size=8)
    ratio = encoder_flops(big, big.num_patches) / encoder_flops(small, small.num_patches)
    assert ratio == 4.0
    full_ratio = flops_breakdown(big)["encoder"] / flops_breakdown(small)["encoder"]
    assert abs(full_ratio - 4.0) / 4.0 <= 0.10


@pytest.mark.parametrize("tokens", [1, 17, 65, 256])
def test_encoder_flops_exactly_linear(tokens):
    cfg = VimConfig()
    assert encoder_flops(cfg, 2 * tokens) == 2 * encoder_flops(cfg, tokens)
    assert encoder_flops(cfg, 0) == 0


def test_count_flops_is_sum_of_parts():
    cfg = VimConfig()
    assert count_flops(cfg) == sum(flops_breakdown(cfg).values())
    assert count_flops(VimModel(cfg)) == count_flops(cfg)


# -- predictions files -----------------------------------------------------------


def _split(labels, k=3):
    return LabeledDataset([Item("x", int(y), f"s{i}.png") for i, y in enumerate(labels)], [f"c{j}" for j in range(k)])


def _write_preds(path, split, probs):
    lines = [it.sample_id + "\t" + "\t".join(f"{p:.6f}" for p in row) for it, row in zip(split.items, probs)]
    path.write_text("\n".join(lines) + "\n")


def test_predictions_one_hot_perfect(tmp_path):
    split = _split([0, 1, 2, 2, 1, 0, 2])
    _write_preds(tmp_path / "p.tsv", split, np.eye(3)[split.labels])
    r = score_predictions_file(tmp_path / "p.tsv", split)
    for v in (r.accuracy, r.precision, r.recall, r.f1, r.specificity, r.sensitivity, r.auc):
        assert v == 1.0


def test_predictions_uniform(tmp_path):
    labels = [0] * 5 + [1] * 3 + [2] * 2
    split = _split(labels)
    _write_preds(tmp_path / "p.tsv", split, np.full((10, 3), 1 / 3))
    r = score_predictions_file(tmp_path / "p.tsv", split)
    # argmax over ties picks class 0, which is also the largest class here
    assert r.accuracy == pytest.approx(max(np.bincount(labels)) / len(labels))
    assert r.auc == 0.5


@pytest.mark.parametrize(
    "body,match",
    [
        ("s0.png\t0.5\t0.5\n", "3 probabilities"),
        ("s0.png\t0.5\tx\t0.5\n", "non-numeric"),
        ("s0.png\t0.5\t0.4\t0.4\n", "sum to 1"),
        ("zz.png\t1\t0\t0\n", "unknown sample"),
        ("s0.png\t1\t0\t0\ns0.png\t1\t0\t0\n", "duplicate"),
        ("s0.png\t1\t0\t0\n", "missing"),
    ],
)
def test_predictions_malformed(tmp_path, body, match):
    p = tmp_path / "p.tsv"
    p.write_text(body)
    with pytest.raises(PredictionsError, match=match):
        score_predictions_file(p, _split([0, 1]))


def test_predictions_error_has_line_number(tmp_path):
    p = tmp_path / "p.tsv"
    p.write_text("s0.png\t1\t0\t0\ns1.png\tbad\n")
    with pytest.raises(PredictionsError, match=r"p\.tsv:2:"):
        score_predictions_file(p, _split([0, 1]))


# -- reports ---------------------------------------------------------------------


def _report(name, rng, k=6, m=40):
    y = rng.integers(0, k, m)
    probs = rng.dirichlet(np.ones(k), m)
    return build_report(y, probs, [f"class{i}" for i in range(k)], model=name, strategy="scratch",
                        params=1234, flops=56789)


def test_emit_single_report(tmp_path, rng):
    paths = emit_report([_report("vim", rng)], tmp_path)
    assert sorted(p.name for p in paths) == ["complexity.csv", "confusion_vim.csv", "metrics.csv"]
    with open(tmp_path / "metrics.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == METRICS_HEADER
    assert rows[0] == "model,strategy,accuracy,precision,recall,f1,specificity,sensitivity,auc,params,flops".split(",")
    assert rows[1][-2:] == ["1234", "56789"]
    assert (tmp_path / "complexity.csv").read_text().splitlines()[0] == ",".join(COMPLEXITY_HEADER)
    cm_rows = (tmp_path / "confusion_vim.csv").read_text().splitlines()
    assert len(cm_rows) == 7 and sum(int(v) for r in cm_rows[1:] for v in r.split(",")[1:]) == 40


def test_emit_twelve_rows_and_byte_identical(tmp_path):
    models = ["vgg16", "vgg19", "resnet50", "inceptionv3", "xception", "visionmamba"]
    rng = np.random.default_rng(1)
    reports = [_report(f"{m}{tag}", rng) for m in models for tag in ("", "*")]
    emit_report(reports, tmp_path / "a")
    emit_report(reports, tmp_path / "b")
    lines = (tmp_path / "a" / "metrics.csv").read_text().splitlines()
    assert len(lines) == 13
    for name in ("metrics.csv", "complexity.csv", "confusion_visionmamba_.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_emit_append(tmp_path, rng):
    emit_report([_report("a", rng)], tmp_path)
    emit_report([_report("b", rng)], tmp_path, append=True)
    assert len((tmp_path / "metrics.csv").read_text().splitlines()) == 3


def test_emit_requires_reports(tmp_path):
    with pytest.raises(ValueError):
        emit_report([], tmp_path)
