"""Independent reference implementations used to check the package.

Everything here is written from the operation definitions alone, in the most
literal way possible (quadratic loops, explicit enumeration), and never calls
into udscreen. Boxes are plain (x_min, y_min, x_max, y_max[, confidence])
tuples so the oracles cannot share a bug with the package's box class.
"""

import math


def iou_ref(a, b) -> float:
    ax0, ay0, ax1, ay1 = a[:4]
    bx0, by0, bx1, by1 = b[:4]
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


def nms_ref(boxes, iou_threshold: float = 0.45):
    """Greedy NMS, quadratic: highest confidence first, ties by coordinates;
    a kept box suppresses every remaining box with IoU strictly above the
    threshold."""
    pending = sorted(boxes, key=lambda b: (-b[4], b[0], b[1], b[2], b[3]))
    kept = []
    while pending:
        best = pending.pop(0)
        kept.append(best)
        pending = [b for b in pending if iou_ref(best, b) <= iou_threshold]
    return kept


def average_precision_ref(ranking, labels):
    """Mean over every labelled UD of the precision at its rank; a UD missing
    from the ranking contributes zero. None when the truth has no UDs."""
    ud_ids = [i for i, lab in labels.items() if lab == "ud"]
    if not ud_ids:
        return None
    precisions = []
    for ud in ud_ids:
        if ud not in ranking:
            precisions.append(0.0)
            continue
        pos = ranking.index(ud) + 1
        hits = sum(1 for r in ranking[:pos] if labels.get(r) == "ud")
        precisions.append(hits / pos)
    return sum(precisions) / len(ud_ids)


def reciprocal_rank_ref(ranking, labels):
    ud_ids = [i for i, lab in labels.items() if lab == "ud"]
    if not ud_ids:
        return None
    for pos, lesion in enumerate(ranking, start=1):
        if labels.get(lesion) == "ud":
            return 1.0 / pos
    return 0.0


def topk_ref(ranking, labels, k, semantics="any"):
    ud_ids = [i for i, lab in labels.items() if lab == "ud"]
    if not ud_ids:
        return None
    top = ranking[:k]
    if semantics == "any":
        return int(any(labels.get(r) == "ud" for r in top))
    return int(all(ud in top for ud in ud_ids))


def threshold_ref(distances, std_mode="population"):
    n = len(distances)
    mean = sum(distances) / n
    var = sum((d - mean) ** 2 for d in distances)
    if std_mode == "population":
        std = math.sqrt(var / n)
    else:
        std = math.sqrt(var / (n - 1)) if n > 1 else 0.0
    return mean + min(mean, std)


def kl_term_ref(mu_row, log_var_row):
    """KL(q || N(0, I)) for one sample, direct from the formula."""
    return -0.5 * sum(1.0 + lv - m * m - math.exp(lv)
                      for m, lv in zip(mu_row, log_var_row))


def kl_gradients_central_diff(mu, log_var, beta, eps=1e-5):
    """Numeric gradients of beta * mean-over-batch KL w.r.t. mu and log_var."""
    batch = len(mu)

    def objective(mu_m, lv_m):
        return beta * sum(kl_term_ref(m, lv) for m, lv in zip(mu_m, lv_m)) / batch

    def perturb(matrix, b, d, delta):
        return [[v + (delta if (i == b and j == d) else 0.0)
                 for j, v in enumerate(row)] for i, row in enumerate(matrix)]

    d_mu = [[(objective(perturb(mu, b, d, eps), log_var)
              - objective(perturb(mu, b, d, -eps), log_var)) / (2 * eps)
             for d in range(len(mu[0]))] for b in range(batch)]
    d_lv = [[(objective(mu, perturb(log_var, b, d, eps))
              - objective(mu, perturb(log_var, b, d, -eps))) / (2 * eps)
             for d in range(len(log_var[0]))] for b in range(batch)]
    return d_mu, d_lv


def _rate(hits, total):
    return hits / total if total else None


def binary_metrics_ref(flags_by_patient, labels_by_patient, scope="micro"):
    """(sensitivity, specificity, accuracy) by direct counting.

    flags_by_patient / labels_by_patient: parallel lists of per-patient dicts
    mapping lesion id -> bool / -> "ud"|"common".
    """
    per_patient = []
    for flags, labels in zip(flags_by_patient, labels_by_patient):
        tp = sum(1 for i in labels if labels[i] == "ud" and flags[i])
        fn = sum(1 for i in labels if labels[i] == "ud" and not flags[i])
        tn = sum(1 for i in labels if labels[i] == "common" and not flags[i])
        fp = sum(1 for i in labels if labels[i] == "common" and flags[i])
        per_patient.append((tp, fn, tn, fp))
    if scope == "micro":
        tp = sum(p[0] for p in per_patient)
        fn = sum(p[1] for p in per_patient)
        tn = sum(p[2] for p in per_patient)
        fp = sum(p[3] for p in per_patient)
        return (_rate(tp, tp + fn), _rate(tn, tn + fp),
                _rate(tp + tn, tp + fn + tn + fp))
    rates = [(_rate(tp, tp + fn), _rate(tn, tn + fp),
              _rate(tp + tn, tp + fn + tn + fp))
             for tp, fn, tn, fp in per_patient]
    out = []
    for k in range(3):
        defined = [r[k] for r in rates if r[k] is not None]
        out.append(sum(defined) / len(defined) if defined else None)
    return tuple(out)
