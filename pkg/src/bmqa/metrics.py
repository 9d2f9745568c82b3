"""Correlation and error metrics for quality prediction, plus caption metrics."""

from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import OptimizeWarning, curve_fit
from scipy.stats import rankdata

from .errors import ContractError, DegenerateInputError


def _pair(x, y, min_n):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ContractError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < min_n:
        raise ContractError(f"need at least {min_n} samples, got {x.size}")
    return x, y


def _pearson(x, y):
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(xc @ xc), math.sqrt(yc @ yc)
    if sx == 0 or sy == 0:
        raise DegenerateInputError("correlation undefined for a constant input")
    return float(np.clip((xc @ yc) / (sx * sy), -1.0, 1.0))


def logistic4(x, b1, b2, b3, b4):
    return (b1 - b2) / (1.0 + np.exp(-(x - b3) / abs(b4))) + b2


def plcc(x, y, logistic=False):
    """Pearson linear correlation of predictions ``x`` with scores ``y``.

    ``logistic=True`` first maps ``x`` through a fitted 4-parameter logistic,
    the usual IQA convention; it is off by default.
    """
    x, y = _pair(x, y, 2)
    if logistic:
        p0 = [y.max(), y.min(), float(np.mean(x)), float(np.std(x)) or 1.0]
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", OptimizeWarning)
                params, _ = curve_fit(logistic4, x, y, p0=p0, maxfev=10000)
            x = logistic4(x, *params)
        except RuntimeError:
            pass
    return _pearson(x, y)


def srcc(x, y):
    """Spearman correlation: Pearson of average (fractional) ranks."""
    x, y = _pair(x, y, 2)
    return _pearson(rankdata(x, method="average"), rankdata(y, method="average"))


def rmse(x, y):
    x, y = _pair(x, y, 1)
    d = x - y
    return float(math.sqrt((d @ d) / d.size))


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidate, reference):
    """Single-reference BLEU-4 with add-one smoothing and brevity penalty.

    A modified n-gram precision with zero matches contributes
    ``1 / (total + 1)`` instead of zero.
    """
    candidate, reference = list(candidate), list(reference)
    if not candidate:
        return 0.0
    log_p = 0.0
    for n in range(1, 5):
        cand = _ngrams(candidate, n)
        total = sum(cand.values())
        if total == 0:
            log_p += math.log(1.0 / 2.0)
            continue
        ref = _ngrams(reference, n)
        match = sum(min(c, ref[g]) for g, c in cand.items())
        log_p += math.log(match / total if match else 1.0 / (total + 1))
    c, r = len(candidate), len(reference)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return float(bp * math.exp(log_p / 4.0))


def topk_accuracy(scores, k):
    """Fraction of targets (columns) whose true candidate (row == column) ranks in the top ``k``.

    Ties are broken by lower candidate index first.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n_cand, n_tgt = scores.shape
    if not 1 <= k <= n_cand:
        raise ContractError(f"k={k} outside 1..{n_cand}")
    hits = 0
    for j in range(n_tgt):
        order = np.lexsort((np.arange(n_cand), -scores[:, j]))
        hits += int(j in order[:k])
    return hits / n_tgt


@dataclass
class EvalReport:
    plcc: float
    srcc: float
    rmse: float
    n: int
    groups: dict = field(default_factory=dict)
    flagged: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def rows(self):
        yield ("all", self)
        for name in sorted(self.groups):
            yield (name, self.groups[name])

    def to_text(self, title="Evaluation"):
        lines = [title, f"{'group':<16}{'n':>6}{'PLCC':>10}{'SRCC':>10}{'RMSE':>10}"]
        for name, rep in self.rows():
            lines.append(f"{name:<16}{rep.n:>6}{rep.plcc:>10.4f}{rep.srcc:>10.4f}{rep.rmse:>10.4f}")
        for name, n in sorted(self.flagged.items()):
            lines.append(f"{name:<16}{n:>6}  (fewer than 2 samples; not computed)")
        for key, value in sorted(self.meta.items()):
            lines.append(f"# {key}: {value}")
        return "\n".join(lines) + "\n"

    def to_csv(self):
        out = ["metric,group,value"]
        for name, rep in self.rows():
            for metric in ("plcc", "srcc", "rmse"):
                out.append(f"{metric},{name},{getattr(rep, metric)!r}")
            out.append(f"n,{name},{rep.n}")
        return "\n".join(out) + "\n"


def _triple(pred, mos):
    return EvalReport(plcc=plcc(pred, mos), srcc=srcc(pred, mos), rmse=rmse(pred, mos), n=len(mos))


def report(preds, mos, groups=None, meta=None):
    """Overall PLCC/SRCC/RMSE plus one sub-report per group label."""
    preds, mos = _pair(preds, mos, 2)
    rep = _triple(preds, mos)
    rep.meta = dict(meta or {})
    if groups is not None:
        groups = np.asarray(groups)
        if groups.size != preds.size:
            raise ContractError("group labels must align with predictions")
        for g in sorted(set(groups.tolist())):
            sel = groups == g
            if sel.sum() < 2:
                rep.flagged[str(g)] = int(sel.sum())
                continue
            rep.groups[str(g)] = _triple(preds[sel], mos[sel])
    return rep
