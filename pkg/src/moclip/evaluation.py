"""ROC-AUC scoring for multi-label classification, plus side-by-side
comparison tables against published reference results.

roc_auc uses the tied-rank Mann-Whitney formulation. Average ranks of tied
runs are halves of integers, exactly representable in float64, so the result
is bit-identical to brute-force pair counting, not merely close.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .core import NO_FINDING, ConfigurationError, ContractViolationError, PathologySet


class UndefinedMetricError(ValueError):
    """AUC requested for a label column containing a single class."""


def _validate_binary(y_true: np.ndarray, scores: np.ndarray) -> None:
    if y_true.ndim != 1 or scores.ndim != 1:
        raise ConfigurationError("labels and scores must be 1-D")
    if y_true.shape != scores.shape:
        raise ConfigurationError(
            f"labels length {y_true.shape[0]} != scores length {scores.shape[0]}"
        )
    if y_true.shape[0] == 0:
        raise UndefinedMetricError("AUC of an empty label vector is undefined")
    if not np.isin(y_true, (0.0, 1.0)).all():
        raise ConfigurationError("labels must be 0 or 1")
    if not np.isfinite(scores).all():
        raise ConfigurationError("scores must be finite")


def roc_auc(y_true, scores) -> float:
    """Area under the ROC curve via tie-averaged ranks.

    Equals the probability a random positive outscores a random negative,
    counting ties as half. Raises UndefinedMetricError when either class is
    absent.
    """
    y = np.asarray(y_true, dtype=np.float64)
    s = np.asarray(scores, dtype=np.float64)
    _validate_binary(y, s)
    n = y.shape[0]
    n_pos = int(y.sum())
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"AUC undefined: {n_pos} positives, {n_neg} negatives"
        )
    order = np.argsort(s, kind="mergesort")
    s_sorted = s[order]
    new_group = np.r_[True, s_sorted[1:] != s_sorted[:-1]]
    group = np.cumsum(new_group) - 1
    counts = np.bincount(group)
    ends = np.cumsum(counts)
    mean_ranks = (ends - counts + 1 + ends) / 2.0
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = mean_ranks[group]
    pos_rank_sum = ranks[y == 1.0].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_curve_points(y_true, scores) -> tuple[np.ndarray, np.ndarray]:
    """(fpr, tpr) arrays over descending score thresholds, for plotting."""
    y = np.asarray(y_true, dtype=np.float64)
    s = np.asarray(scores, dtype=np.float64)
    _validate_binary(y, s)
    n_pos = y.sum()
    n_neg = y.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC curve undefined with a single class")
    order = np.argsort(-s, kind="mergesort")
    y_sorted = y[order]
    s_sorted = s[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(1.0 - y_sorted)
    last_of_threshold = np.r_[s_sorted[1:] != s_sorted[:-1], True]
    tpr = np.r_[0.0, tp[last_of_threshold] / n_pos]
    fpr = np.r_[0.0, fp[last_of_threshold] / n_neg]
    return fpr, tpr


@dataclass(frozen=True)
class EvaluationResult:
    """Per-pathology AUCs plus macro summaries and bookkeeping."""

    per_pathology: dict[str, float]
    skipped: tuple[str, ...]
    macro_auc: float
    macro_auc_diseases: float
    n_samples: int

    def to_json(self) -> str:
        return json.dumps({
            "per_pathology": self.per_pathology,
            "skipped": list(self.skipped),
            "macro_auc": self.macro_auc,
            "macro_auc_diseases": self.macro_auc_diseases,
            "n_samples": self.n_samples,
        }, indent=2)


def align_rows(truth_ids: list[str], pred_ids: list[str]) -> np.ndarray:
    """Indices reordering prediction rows to truth order.

    Every truth id must appear exactly once in the predictions; the error
    message names what is missing or duplicated.
    """
    positions: dict[str, int] = {}
    dupes = []
    for i, pid in enumerate(pred_ids):
        if pid in positions:
            dupes.append(pid)
        positions[pid] = i
    if dupes:
        raise ContractViolationError(f"duplicate prediction ids: {sorted(set(dupes))[:10]}")
    missing = [t for t in truth_ids if t not in positions]
    if missing:
        raise ContractViolationError(
            f"{len(missing)} labeled ids have no prediction, e.g. {missing[:10]}"
        )
    return np.array([positions[t] for t in truth_ids], dtype=np.int64)


def evaluate(y_true: np.ndarray, scores: np.ndarray,
             pathologies: PathologySet) -> EvaluationResult:
    """Column-wise AUC over a multi-label panel.

    Columns with a single class are skipped with a warning rather than
    poisoning the macro average. The macro is reported both over every scored
    column and over disease columns only, since the clear-image label behaves
    differently from the diseases.
    """
    y = np.asarray(y_true, dtype=np.float64)
    s = np.asarray(scores, dtype=np.float64)
    if y.ndim != 2 or s.ndim != 2:
        raise ConfigurationError("expected (N, P) label and score matrices")
    if y.shape != s.shape:
        raise ConfigurationError(f"labels shape {y.shape} != scores shape {s.shape}")
    if y.shape[1] != len(pathologies):
        raise ConfigurationError(
            f"{y.shape[1]} label columns but {len(pathologies)} pathologies"
        )
    per: dict[str, float] = {}
    skipped = []
    for j, name in enumerate(pathologies.names):
        try:
            per[name] = roc_auc(y[:, j], s[:, j])
        except UndefinedMetricError:
            warnings.warn(f"AUC skipped for {name!r}: single-class column",
                          stacklevel=2)
            skipped.append(name)
    if not per:
        raise UndefinedMetricError("no pathology had both classes present")
    disease_aucs = [v for k, v in per.items() if k != NO_FINDING]
    return EvaluationResult(
        per_pathology=per,
        skipped=tuple(skipped),
        macro_auc=float(np.mean(list(per.values()))),
        macro_auc_diseases=float(np.mean(disease_aucs)) if disease_aucs else float("nan"),
        n_samples=int(y.shape[0]),
    )


# ---------------------------------------------------------------------------
# Reference tables and comparison rendering

@dataclass(frozen=True)
class ReferenceTable:
    """A published per-pathology AUC table for side-by-side comparison."""

    dataset: str
    variants: dict[str, dict[str, float]]
    averages: dict[str, float]

    def pathology_names(self) -> list[str]:
        first = next(iter(self.variants.values()))
        return list(first)


REFERENCE_NAMES = ("nih", "chexpert")


def load_reference_table(name: str) -> ReferenceTable:
    if name not in REFERENCE_NAMES:
        raise ConfigurationError(
            f"unknown reference table {name!r}, expected one of {REFERENCE_NAMES}"
        )
    path = resources.files("moclip") / "fixtures" / f"reference_auc_{name}.json"
    raw = json.loads(path.read_text())
    variants = {v: dict(t) for v, t in raw["variants"].items()}
    keys = None
    for v, table in variants.items():
        if keys is None:
            keys = set(table)
        elif set(table) != keys:
            raise ConfigurationError(f"reference variant {v!r} has mismatched rows")
    return ReferenceTable(dataset=raw["dataset"], variants=variants,
                          averages=dict(raw["averages"]))


def compare(tables: dict[str, dict[str, float]], *, mark_best: bool = True,
            add_average: bool = True) -> str:
    """Fixed-width text table of per-pathology AUCs across variants.

    All variants must cover the same pathologies; the best value in each row
    is starred. Row order follows the first variant.
    """
    if not tables:
        raise ConfigurationError("nothing to compare")
    names = list(tables)
    rows = list(tables[names[0]])
    for v in names[1:]:
        if set(tables[v]) != set(rows):
            extra = sorted(set(tables[v]) ^ set(rows))
            raise ConfigurationError(
                f"variant {v!r} covers different pathologies: {extra[:10]}"
            )

    header = ["Pathology"] + names
    lines = []
    for row in rows:
        values = [tables[v][row] for v in names]
        best = max(values)
        cells = [row]
        for val in values:
            star = "*" if mark_best and val == best else " "
            cells.append(f"{val:.3f}{star}")
        lines.append(cells)
    if add_average:
        cells = ["Macro average"]
        means = [float(np.mean(list(tables[v].values()))) for v in names]
        best = max(means)
        for mval in means:
            star = "*" if mark_best and mval == best else " "
            cells.append(f"{mval:.3f}{star}")
        lines.append(cells)

    widths = [max(len(header[c]), *(len(line[c]) for line in lines))
              for c in range(len(header))]
    out = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    out.append("  ".join("-" * w for w in widths))
    for line in lines:
        out.append("  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip())
    return "\n".join(out) + "\n"
