"""Classification metrics, ROC AUC, parameter/FLOP accounting and CSV reports.

FLOP accounting rules (declared conventions, not hardware measurements):

========================  =================================
matmul (m,k) x (k,n)      2*m*k*n
depthwise causal conv     2*L*D*K
selective scan            6*L*D*N
layer norm                5 per element
unary activation          1 per element
elementwise add/mul       1 per element
========================  =================================
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .data import LabeledDataset
from .vim_model import VimConfig, VimModel

log = logging.getLogger(__name__)

__all__ = [
    "ConfusionMatrix",
    "EvalReport",
    "PredictionsError",
    "confusion",
    "metrics",
    "roc_auc_binary",
    "roc_auc_ovr",
    "build_report",
    "count_params",
    "count_flops",
    "flops_breakdown",
    "encoder_flops",
    "matmul_flops",
    "scan_flops",
    "conv_flops",
    "score_predictions_file",
    "emit_report",
    "METRICS_HEADER",
    "COMPLEXITY_HEADER",
]

METRICS_HEADER = [
    "model", "strategy", "accuracy", "precision", "recall", "f1",
    "specificity", "sensitivity", "auc", "params", "flops",
]
COMPLEXITY_HEADER = ["model", "flops", "params", "accuracy"]


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # [K, K], rows true, columns predicted
    class_names: list[str]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(y_true, y_pred, k: int, class_names: Sequence[str] | None = None) -> ConfusionMatrix:
    y_true = np.asarray(y_true, dtype=np.int64).reshape(-1)
    y_pred = np.asarray(y_pred, dtype=np.int64).reshape(-1)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"confusion: {y_true.size} true labels vs {y_pred.size} predictions")
    for arr, what in ((y_true, "true"), (y_pred, "predicted")):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise ValueError(f"confusion: {what} label outside [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)
    names = list(class_names) if class_names is not None else [str(i) for i in range(k)]
    return ConfusionMatrix(counts, names)


def _safe_div(num: np.ndarray, den: np.ndarray, what: str, names) -> np.ndarray:
    out = np.zeros(num.shape, dtype=np.float64)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    if not ok.all():
        bad = [names[i] for i in np.flatnonzero(~ok)]
        log.warning("%s undefined (zero denominator) for classes %s; using 0", what, bad)
    return out


def metrics(cm: ConfusionMatrix) -> dict:
    """One-vs-rest per-class rates and support-weighted aggregates."""
    c = cm.counts.astype(np.int64)
    total = int(c.sum())
    if total == 0:
        raise ValueError("metrics: empty confusion matrix")
    tp = np.diag(c)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    tn = total - tp - fp - fn
    names = cm.class_names
    precision = _safe_div(tp, tp + fp, "precision", names)
    recall = _safe_div(tp, tp + fn, "recall", names)
    specificity = _safe_div(tn, tn + fp, "specificity", names)
    denom = precision + recall
    f1 = np.zeros_like(precision)
    nz = denom > 0
    f1[nz] = 2 * precision[nz] * recall[nz] / denom[nz]
    support = tp + fn
    w = support / total

    def wavg(v):
        return float(np.dot(w, v))

    agg_recall = wavg(recall)
    return {
        "per_class": {
            "precision": precision,
            "recall": recall,
            "f1": f1,
            "specificity": specificity,
            "support": support,
        },
        "accuracy": int(tp.sum()) / total,
        "precision": wavg(precision),
        "recall": agg_recall,
        "f1": wavg(f1),
        "specificity": wavg(specificity),
        "sensitivity": agg_recall,
    }


def roc_auc_binary(scores, positive) -> float:
    """Area under the ROC curve from ranks, ties sharing their midrank."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    positive = np.asarray(positive, dtype=bool).reshape(-1)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative sample")
    ranks = rankdata(scores, method="average")
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def roc_auc_ovr(scores, y_true) -> tuple[float, dict[int, float]]:
    """Macro one-vs-rest AUC over the classes that have both positives and negatives."""
    scores = np.asarray(scores, dtype=np.float64)
    y_true = np.asarray(y_true, dtype=np.int64).reshape(-1)
    if scores.ndim != 2 or scores.shape[0] != y_true.size:
        raise ValueError(f"roc_auc_ovr: scores {scores.shape} vs {y_true.size} labels")
    per: dict[int, float] = {}
    for c in range(scores.shape[1]):
        pos = y_true == c
        if pos.all() or not pos.any():
            log.warning("AUC for class %d skipped: %s", c, "no negatives" if pos.all() else "absent")
            continue
        per[c] = roc_auc_binary(scores[:, c], pos)
    if not per:
        raise ValueError("roc_auc_ovr: no class has both positive and negative samples")
    return float(np.mean(list(per.values()))), per


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------


@dataclass
class EvalReport:
    model: str
    strategy: str
    confusion: ConfusionMatrix
    accuracy: float
    precision: float
    recall: float
    f1: float
    specificity: float
    sensitivity: float
    auc: float
    per_class: dict = field(default_factory=dict)
    per_class_auc: dict = field(default_factory=dict)
    params: int | None = None
    flops: int | None = None


def build_report(
    y_true,
    probs,
    class_names: Sequence[str],
    model: str = "model",
    strategy: str = "",
    params: int | None = None,
    flops: int | None = None,
) -> EvalReport:
    probs = np.asarray(probs, dtype=np.float64)
    k = len(class_names)
    y_true = np.asarray(y_true, dtype=np.int64)
    cm = confusion(y_true, probs.argmax(axis=1), k, class_names)
    m = metrics(cm)
    try:
        auc, per_auc = roc_auc_ovr(probs, y_true)
    except ValueError as exc:
        log.warning("AUC unavailable: %s", exc)
        auc, per_auc = float("nan"), {}
    return EvalReport(
        model=model,
        strategy=strategy,
        confusion=cm,
        accuracy=m["accuracy"],
        precision=m["precision"],
        recall=m["recall"],
        f1=m["f1"],
        specificity=m["specificity"],
        sensitivity=m["sensitivity"],
        auc=auc,
        per_class=m["per_class"],
        per_class_auc=per_auc,
        params=params,
        flops=flops,
    )


# --------------------------------------------------------------------------
# Complexity
# --------------------------------------------------------------------------


def count_params(model) -> int:
    named = model.named_parameters() if hasattr(model, "named_parameters") else model
    return int(sum(t.size for _, t in named))


def matmul_flops(m: int, k: int, n: int) -> int:
    return 2 * m * k * n


def conv_flops(length: int, d: int, k: int) -> int:
    return 2 * length * d * k


def scan_flops(length: int, d: int, n: int) -> int:
    return 6 * length * d * n


_LN = 5


def encoder_flops(cfg: VimConfig, tokens: int) -> int:
    """FLOPs of all Vim blocks over a sequence of ``tokens`` tokens."""
    t, d, di, n, k = tokens, cfg.embed_dim, cfg.d_inner, cfg.state_dim, cfg.conv_kernel
    direction = (
        conv_flops(t, di, k)
        + t * di  # silu
        + matmul_flops(t, di, 1)  # delta down-projection
        + matmul_flops(t, 1, di)  # delta up-projection
        + 2 * t * di  # bias add + softplus
        + 2 * matmul_flops(t, di, n)  # B and C projections
        + scan_flops(t, di, n)
    )
    block = (
        _LN * t * d
        + matmul_flops(t, d, 2 * di)
        + 2 * direction
        + 3 * t * di  # sum of directions, silu(z), gate
        + matmul_flops(t, di, d)
        + t * d  # residual
    )
    return cfg.depth * block


def flops_breakdown(cfg: VimConfig) -> dict[str, int]:
    lp, t, d = cfg.num_patches, cfg.seq_len, cfg.embed_dim
    h, k = cfg.hidden, cfg.num_classes
    return {
        "patch_embed": matmul_flops(lp, cfg.patch_dim, d) + lp * d,
        "pos_embed": t * d,
        "encoder": encoder_flops(cfg, t),
        "final_norm": _LN * t * d,
        "head": matmul_flops(1, d, h) + 2 * h + matmul_flops(1, h, k) + k,
    }


def count_flops(model_or_cfg) -> int:
    """FLOPs of one single-image forward pass under the declared rules."""
    cfg = model_or_cfg.cfg if isinstance(model_or_cfg, VimModel) else model_or_cfg
    return int(sum(flops_breakdown(cfg).values()))


# --------------------------------------------------------------------------
# External predictions
# --------------------------------------------------------------------------


class PredictionsError(ValueError):
    pass


def score_predictions_file(
    path,
    split: LabeledDataset,
    model: str = "external",
    strategy: str = "",
    params: int | None = None,
    flops: int | None = None,
) -> EvalReport:
    """Score a ``sample_id<TAB>p_0 ... p_{K-1}`` file against the labels in ``split``."""
    k = split.num_classes
    truth = {it.sample_id: it.label for it in split.items}
    probs: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) == 2:
                parts = [parts[0]] + parts[1].split()
            if len(parts) != k + 1:
                raise PredictionsError(f"{path}:{lineno}: expected sample id and {k} probabilities")
            sid = parts[0]
            try:
                row = np.array([float(v) for v in parts[1:]])
            except ValueError:
                raise PredictionsError(f"{path}:{lineno}: non-numeric probability") from None
            if not np.isfinite(row).all() or (row < 0).any() or abs(row.sum() - 1.0) > 1e-3:
                raise PredictionsError(f"{path}:{lineno}: probabilities must be >= 0 and sum to 1 +- 1e-3")
            if sid not in truth:
                raise PredictionsError(f"{path}:{lineno}: unknown sample {sid!r}")
            if sid in probs:
                raise PredictionsError(f"{path}:{lineno}: duplicate sample {sid!r}")
            probs[sid] = row
    missing = [sid for sid in truth if sid not in probs]
    if missing:
        raise PredictionsError(f"{path}: missing predictions for {len(missing)} samples, e.g. {missing[:3]}")
    ids = [it.sample_id for it in split.items]
    return build_report(
        [truth[s] for s in ids],
        np.stack([probs[s] for s in ids]) if ids else np.zeros((0, k)),
        split.class_names,
        model=model,
        strategy=strategy,
        params=params,
        flops=flops,
    )


# --------------------------------------------------------------------------
# CSV output
# --------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, float) and math.isnan(v):
        return "nan"
    return f"{float(v):.6f}"


def _metrics_row(r: EvalReport) -> list[str]:
    return [r.model, r.strategy] + [
        _fmt(getattr(r, name)) for name in METRICS_HEADER[2:]
    ]


def _safe_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", name) or "model"


def _csv_text(rows: list[list[str]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerows(rows)
    return buf.getvalue()


def _write_atomic(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _existing_rows(path: Path, header: list[str]) -> list[list[str]]:
    if not path.exists():
        return []
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != header:
        raise ValueError(f"{path}: unexpected header, refusing to append")
    return rows[1:]


def emit_report(reports: Sequence[EvalReport], out_dir, append: bool = False) -> list[Path]:
    """Write ``metrics.csv``, ``complexity.csv`` and one ``confusion_<model>.csv`` per report.

    With ``append`` the rows already present in the two summary files are kept.
    """
    if not reports:
        raise ValueError("emit_report needs at least one report")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory {out} is not writable")
    metrics_path = out / "metrics.csv"
    complexity_path = out / "complexity.csv"
    m_rows = _existing_rows(metrics_path, METRICS_HEADER) if append else []
    c_rows = _existing_rows(complexity_path, COMPLEXITY_HEADER) if append else []
    written = []
    for r in reports:
        m_rows.append(_metrics_row(r))
        c_rows.append([r.model, _fmt(r.flops), _fmt(r.params), _fmt(r.accuracy)])
        cm_path = out / f"confusion_{_safe_name(r.model)}.csv"
        names = r.confusion.class_names
        rows = [["true\\pred"] + names]
        rows += [[names[i]] + [str(int(v)) for v in r.confusion.counts[i]] for i in range(len(names))]
        _write_atomic(cm_path, _csv_text(rows))
        written.append(cm_path)
    _write_atomic(metrics_path, _csv_text([METRICS_HEADER] + m_rows))
    _write_atomic(complexity_path, _csv_text([COMPLEXITY_HEADER] + c_rows))
    return [metrics_path, complexity_path] + written
