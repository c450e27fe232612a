"""Evaluation metrics and statistical validation: confusion matrices,
precision/recall/F1, one-vs-rest ROC/AUC, stratified k-fold cross-validation,
paired t-tests and per-class confidence intervals.

The Student-t tail probability is computed from scratch via the
continued-fraction regularized incomplete beta so the t-test does not depend
on any statistics library.
"""

import dataclasses
import json
import math

import numpy as np

from .train import predict_probs


class DegenerateTestError(Exception):
    """Paired t-test on nonzero differences with zero variance."""


# -- core metric computation -----------------------------------------------------


@dataclasses.dataclass
class EvalReport:
    confusion: np.ndarray          # [K, K], rows = true class
    precision: np.ndarray          # [K]
    recall: np.ndarray
    f1: np.ndarray
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    roc: dict                      # class -> {"points": [(fpr, tpr)...], "auc": float} | None
    confidence: dict               # class -> {"mean": float, "half_width": float | None} | None

    def to_json(self):
        payload = {
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "per_class": [
                {"class": c, "precision": float(self.precision[c]),
                 "recall": float(self.recall[c]), "f1": float(self.f1[c]),
                 "support": int(self.confusion[c].sum()),
                 "auc": None if self.roc[c] is None else self.roc[c]["auc"],
                 "confidence": self.confidence[c]}
                for c in range(len(self.precision))
            ],
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def confusion_csv_lines(self):
        k = self.confusion.shape[0]
        lines = ["true\\pred," + ",".join(str(c) for c in range(k))]
        for c in range(k):
            lines.append(f"{c}," + ",".join(str(int(v)) for v in self.confusion[c]))
        return lines

    def roc_csv_lines(self):
        lines = ["class,fpr,tpr"]
        for c in sorted(self.roc):
            if self.roc[c] is None:
                continue
            for fpr, tpr in self.roc[c]["points"]:
                lines.append(f"{c},{fpr!r},{tpr!r}")
        return lines


def roc_auc(scores, labels, positive_class):
    """Threshold-sweep ROC points and trapezoid AUC for one class.

    Equal scores are grouped per threshold, which makes the trapezoid area
    identical to the rank (Mann-Whitney) formulation with ties counted 0.5.
    """
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels) == positive_class
    pos = int(y.sum())
    neg = int(len(y) - pos)
    if pos == 0 or neg == 0:
        raise ValueError(f"roc_auc needs both positives and negatives for class {positive_class}")
    order = np.argsort(-scores, kind="stable")
    points = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    while i < len(order):
        j = i
        while j < len(order) and scores[order[j]] == scores[order[i]]:
            if y[order[j]]:
                tp += 1
            else:
                fp += 1
            j += 1
        points.append((fp / neg, tp / pos))
        i = j
    auc = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        auc += (x1 - x0) * (y0 + y1) / 2.0
    return points, auc


def report_from_scores(labels, probs):
    """Build the full EvalReport from true labels and softmax outputs."""
    labels = np.asarray(labels)
    probs = np.asarray(probs)
    n, k = probs.shape
    preds = probs.argmax(axis=1)
    confusion = np.zeros((k, k), dtype=np.int64)
    for t, p in zip(labels, preds):
        confusion[t, p] += 1

    tp = np.diag(confusion).astype(np.float64)
    fp = confusion.sum(axis=0) - tp
    fn = confusion.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        recall = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
        f1 = np.where(precision + recall > 0,
                      2 * precision * recall / (precision + recall), 0.0)
    roc = {}
    for c in range(k):
        try:
            points, auc = roc_auc(probs[:, c], labels, c)
            roc[c] = {"points": points, "auc": auc}
        except ValueError:
            roc[c] = None
    return EvalReport(
        confusion=confusion,
        precision=precision, recall=recall, f1=f1,
        accuracy=float(tp.sum() / n),
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        roc=roc,
        confidence=class_confidence_interval(probs, preds),
    )


def evaluate(model, samples, batch_size=64):
    """Run the model over `samples` and compute the evaluation report."""
    if not samples:
        raise ValueError("evaluate needs a non-empty sample list")
    labels = np.array([s.label for s in samples])
    probs = predict_probs(model, samples, batch_size=batch_size)
    return report_from_scores(labels, probs)


def class_confidence_interval(probs, predictions):
    """Mean max-softmax confidence per predicted class with a 95% normal
    half-width (1.96 * sd / sqrt(n)); classes never predicted are None,
    singleton classes carry half_width None."""
    probs = np.asarray(probs)
    predictions = np.asarray(predictions)
    k = probs.shape[1]
    conf = probs[np.arange(len(predictions)), predictions]
    out = {}
    for c in range(k):
        vals = conf[predictions == c]
        if len(vals) == 0:
            out[c] = None
        elif len(vals) == 1:
            out[c] = {"mean": float(vals[0]), "half_width": None}
        else:
            sd = float(np.std(vals, ddof=1))
            out[c] = {"mean": float(vals.mean()),
                      "half_width": 1.96 * sd / math.sqrt(len(vals))}
    return out


# -- Student-t machinery ------------------------------------------------------------


def _betacf(a, b, x, max_iter=200, eps=3e-14):
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise RuntimeError("incomplete beta continued fraction failed to converge")


def regularized_incomplete_beta(a, b, x):
    """I_x(a, b) via the continued fraction, using the symmetry transform for
    fast convergence on either side of the mean."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must be in [0,1], got {x}")
    if x == 0.0 or x == 1.0:
        return float(x)
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t, df):
    """P(|T| >= |t|) for Student-t with df degrees of freedom."""
    if df < 1:
        raise ValueError(f"df must be >= 1, got {df}")
    t = float(t)
    if t == 0.0:
        return 1.0
    x = df / (df + t * t)
    return regularized_incomplete_beta(df / 2.0, 0.5, x)


def paired_t_test(a, b):
    """Two-sided paired t-test; returns (t, p, df).

    All-zero differences give (0, 1, n-1); identical nonzero differences have
    no variance and raise DegenerateTestError.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired_t_test needs two equal-length 1-D arrays")
    n = len(a)
    if n < 2:
        raise ValueError("paired_t_test needs at least 2 pairs")
    d = a - b
    df = n - 1
    if np.all(d == 0.0):
        return 0.0, 1.0, df
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        raise DegenerateTestError("differences are identical and nonzero; "
                                  "t is unbounded")
    t = float(d.mean() / (sd / math.sqrt(n)))
    return t, student_t_two_sided_p(t, df), df


# -- cross-validation ----------------------------------------------------------------


@dataclasses.dataclass
class CvSummary:
    metric_names: list
    folds: list                    # one dict per fold, metric -> value
    checksums: list                # one per fold, may contain None

    def mean(self, metric):
        return float(np.mean([f[metric] for f in self.folds]))

    def std(self, metric):
        return float(np.std([f[metric] for f in self.folds], ddof=1))

    def to_csv_lines(self):
        header = ["fold"] + self.metric_names + ["checksum"]
        lines = [",".join(header)]
        for i, fold in enumerate(self.folds):
            vals = [repr(float(fold[m])) for m in self.metric_names]
            lines.append(",".join([str(i)] + vals + [self.checksums[i] or ""]))
        lines.append(",".join(["mean"] + [repr(self.mean(m)) for m in self.metric_names] + [""]))
        lines.append(",".join(["std"] + [repr(self.std(m)) for m in self.metric_names] + [""]))
        return lines

    @classmethod
    def from_csv_lines(cls, lines):
        header = lines[0].split(",")
        metric_names = header[1:-1]
        folds, checksums = [], []
        for line in lines[1:]:
            parts = line.split(",")
            if parts[0] in ("mean", "std"):
                continue
            folds.append({m: float(v) for m, v in zip(metric_names, parts[1:-1])})
            checksums.append(parts[-1] or None)
        return cls(metric_names=metric_names, folds=folds, checksums=checksums)


def assign_folds(samples, k, seed=0):
    """Stratified fold labels: per-class shuffle then round-robin.

    The round-robin start rotates with the class index so leftover samples
    spread across folds instead of always landing in the low fold numbers;
    per-class and total fold sizes both stay within one of each other.
    """
    if k < 2:
        raise ValueError("k-fold needs k >= 2")
    rng = np.random.default_rng(seed)
    by_class = {}
    for i, s in enumerate(samples):
        by_class.setdefault(s.label, []).append(i)
    for offset, label in enumerate(sorted(by_class)):
        idx = by_class[label]
        if len(idx) < k:
            raise ValueError(f"class {label} has {len(idx)} samples, fewer than k={k}")
        order = rng.permutation(len(idx))
        for pos, j in enumerate(order):
            samples[idx[j]].fold = (pos + offset) % k
    return samples


def kfold_cv(samples, k, train_fn, seed=0):
    """Stratified k-fold loop.

    train_fn(train_samples, held_out_samples, fold_index) returns a dict of
    metric values and may include a 'checksum' entry identifying the fold's
    model. Returns a CvSummary with per-fold values, mean and sample std.
    """
    assign_folds(samples, k, seed=seed)
    folds = []
    checksums = []
    metric_names = None
    for fold in range(k):
        held = [s for s in samples if s.fold == fold]
        rest = [s for s in samples if s.fold != fold]
        result = dict(train_fn(rest, held, fold))
        checksums.append(result.pop("checksum", None))
        if metric_names is None:
            metric_names = sorted(result)
        folds.append(result)
    return CvSummary(metric_names=metric_names, folds=folds, checksums=checksums)
