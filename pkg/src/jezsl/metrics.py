"""Standard and generalized zero-shot evaluation metrics.

T1 is the mean per-class top-1 accuracy over unseen test classes in the
ZSL regime. u and s are GZSL mean per-class accuracies over unseen and seen
test data, H their harmonic mean. All values are kept in [0, 1] internally
and scaled to percentages only for display.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .compat import AttributeTable, CompatibilityModel, LabeledEmbeddings, infer_batch


@dataclass
class GzslReport:
    t1: float
    u: float
    s: float
    h: float
    per_class: dict[int, tuple[float, int]] = field(default_factory=dict)


def per_class_accuracy(
    predictions, labels, classes
) -> tuple[dict[int, tuple[float, int]], float]:
    """Accuracy per class and the class-balanced mean.

    Classes without test samples are excluded from the mean (0/0 undefined).
    Returns ({class_id: (accuracy, sample_count)}, mean).
    """
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(predictions) != len(labels):
        raise ValueError(
            f"{len(predictions)} predictions vs {len(labels)} labels"
        )
    classes = set(int(c) for c in classes)
    outside = set(int(c) for c in labels) - classes
    if outside:
        raise ValueError(f"labels outside the class set: {sorted(outside)}")

    per_class: dict[int, tuple[float, int]] = {}
    accs = []
    for c in sorted(classes):
        mask = labels == c
        count = int(np.count_nonzero(mask))
        if count == 0:
            continue
        acc = float(np.count_nonzero(predictions[mask] == c)) / count
        per_class[c] = (acc, count)
        accs.append(acc)
    mean = float(np.mean(accs)) if accs else 0.0
    return per_class, mean


def harmonic_mean(u: float, s: float) -> float:
    """2us/(u+s); 0 when both are 0. Consistent on either [0,1] or percent scale."""
    if u < 0 or s < 0:
        raise ValueError(f"harmonic_mean: negative input ({u}, {s})")
    if u + s == 0:
        return 0.0
    return 2.0 * u * s / (u + s)


def evaluate(
    model: CompatibilityModel,
    test_seen: LabeledEmbeddings,
    test_unseen: LabeledEmbeddings,
    table: AttributeTable,
) -> GzslReport:
    """Full protocol: T1 in the ZSL regime, u/s/H in the GZSL regime."""
    if len(test_unseen.embeddings) == 0:
        raise ValueError("evaluate: empty unseen test split")
    if len(test_seen.embeddings) == 0:
        raise ValueError("evaluate: empty seen test split")
    bad_unseen = set(int(c) for c in test_unseen.labels) - table.unseen_ids
    if bad_unseen:
        raise ValueError(f"unseen test labels not in unseen classes: {sorted(bad_unseen)}")
    bad_seen = set(int(c) for c in test_seen.labels) - table.seen_ids
    if bad_seen:
        raise ValueError(f"seen test labels not in seen classes: {sorted(bad_seen)}")

    zsl_preds = infer_batch(model, test_unseen.embeddings, table, "zsl")
    _, t1 = per_class_accuracy(zsl_preds, test_unseen.labels, table.unseen_ids)

    all_classes = table.seen_ids | table.unseen_ids
    gzsl_unseen = infer_batch(model, test_unseen.embeddings, table, "gzsl")
    per_u, u = per_class_accuracy(gzsl_unseen, test_unseen.labels, all_classes)
    gzsl_seen = infer_batch(model, test_seen.embeddings, table, "gzsl")
    per_s, s = per_class_accuracy(gzsl_seen, test_seen.labels, all_classes)

    per_class = {**per_u, **per_s}
    return GzslReport(t1=t1, u=u, s=s, h=harmonic_mean(u, s), per_class=per_class)


def format_report(report: GzslReport) -> str:
    """Aligned plain-text table, percentages with one decimal."""
    lines = [
        "metric      value",
        "------      -----",
        f"T1          {100.0 * report.t1:5.1f}",
        f"u           {100.0 * report.u:5.1f}",
        f"s           {100.0 * report.s:5.1f}",
        f"H           {100.0 * report.h:5.1f}",
        "",
        "class   accuracy   samples",
    ]
    for cid in sorted(report.per_class):
        acc, count = report.per_class[cid]
        lines.append(f"{cid:<7d} {100.0 * acc:8.1f}   {count:d}")
    return "\n".join(lines) + "\n"


def format_kv(report: GzslReport) -> str:
    """Machine-readable key-value lines with full precision, [0,1] scale."""
    lines = [
        f"t1={report.t1:.17g}",
        f"u={report.u:.17g}",
        f"s={report.s:.17g}",
        f"h={report.h:.17g}",
    ]
    for cid in sorted(report.per_class):
        acc, count = report.per_class[cid]
        lines.append(f"class_{cid}_accuracy={acc:.17g}")
        lines.append(f"class_{cid}_samples={count}")
    return "\n".join(lines) + "\n"
