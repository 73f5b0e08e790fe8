"""Anomaly decision rules and evaluation metrics.

Two criteria are scored for every sample:

* energy: flag when ``E(x) > E_th`` (equivalent to a density threshold, since
  the partition function does not depend on ``x``);
* reconstruction error: flag when ``||x - f(x)||^2 = ||grad_x E(x)||^2 > Error_th``.

Sequence models sum both quantities over time steps. Flagging uses strict
inequality, so samples exactly at a threshold count as inliers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CRITERIA = ("energy", "recon")


@dataclass
class ScoreReport:
    ids: list[str]
    energy: np.ndarray
    recon_error: np.ndarray
    thresholds: dict = field(default_factory=dict)  # criterion -> threshold
    truth: np.ndarray | None = None  # True for ground-truth outliers

    def __post_init__(self):
        self.energy = np.asarray(self.energy, dtype=float)
        self.recon_error = np.asarray(self.recon_error, dtype=float)
        if self.truth is not None:
            self.truth = np.asarray(self.truth, dtype=bool)

    def __len__(self):
        return len(self.ids)

    def values(self, criterion: str) -> np.ndarray:
        if criterion == "energy":
            return self.energy
        if criterion == "recon":
            return self.recon_error
        raise ValueError(f"unknown criterion {criterion!r}")

    def flags(self, criterion: str) -> np.ndarray:
        return self.values(criterion) > self.thresholds[criterion]

    def set_thresholds(self, rho: float) -> "ScoreReport":
        for c in CRITERIA:
            self.thresholds[c] = choose_threshold(self.values(c), rho)
        return self

    def write(self, path) -> None:
        """Tab-separated, one sample per line; floats use ``repr`` so they round-trip."""
        th = "\t".join(f"{c}_threshold={float(self.thresholds[c])!r}" for c in CRITERIA if c in self.thresholds)
        lines = [f"# dsebm-scores {th}".rstrip(), "id\tenergy\trecon_error\tflag_energy\tflag_recon\toutlier"]
        for i, sid in enumerate(self.ids):
            fe = int(self.energy[i] > self.thresholds["energy"]) if "energy" in self.thresholds else ""
            fr = int(self.recon_error[i] > self.thresholds["recon"]) if "recon" in self.thresholds else ""
            truth = "" if self.truth is None else int(self.truth[i])
            lines.append(f"{sid}\t{float(self.energy[i])!r}\t{float(self.recon_error[i])!r}\t{fe}\t{fr}\t{truth}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path) -> "ScoreReport":
        ids, energy, recon, truth = [], [], [], []
        thresholds = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            if not line.strip():
                continue
            if line.startswith("# dsebm-scores"):
                for tok in line.split()[2:]:
                    key, _, val = tok.partition("=")
                    thresholds[key.removesuffix("_threshold")] = float(val)
                continue
            if line.startswith("#") or line.startswith("id\t"):
                continue
            cols = line.split("\t")
            if len(cols) != 6:
                raise ValueError(f"{path}:{lineno}: expected 6 columns, got {len(cols)}")
            ids.append(cols[0])
            energy.append(float(cols[1]))
            recon.append(float(cols[2]))
            truth.append(cols[5])
        has_truth = bool(truth) and all(t != "" for t in truth)
        return cls(ids, energy, recon, thresholds,
                   np.array([t == "1" for t in truth]) if has_truth else None)


def score_samples(model, samples, ids=None, truth=None) -> ScoreReport:
    """Energy and squared score norm for each sample (no thresholds yet)."""
    energy = np.asarray(model.energy(samples), dtype=float)
    scores = model.score(samples)
    if isinstance(scores, list):
        recon = np.array([float(np.sum(s * s)) for s in scores])
    else:
        recon = np.sum(np.reshape(scores, (len(scores), -1)) ** 2, axis=1)
    if ids is None:
        ids = [str(i) for i in range(len(energy))]
    return ScoreReport(list(ids), energy, recon, {}, truth)


def choose_threshold(scores, rho: float) -> float:
    """The ``(1 - rho)`` empirical quantile: the smallest score with at least
    ``(1 - rho)`` of the sample at or below it."""
    scores = np.sort(np.asarray(scores, dtype=float))
    if scores.size == 0:
        raise ValueError("cannot choose a threshold from no scores")
    if not 0 < rho < 1:
        raise ValueError("rho must lie in (0, 1)")
    k = math.ceil((1.0 - rho) * scores.size - 1e-9)
    return float(scores[max(k, 1) - 1])


def _prf(tp: int, fp: int, fn: int):
    precision = tp / (tp + fp) if tp + fp else None
    recall = tp / (tp + fn) if tp + fn else None
    if precision is None or recall is None:
        f1 = None
    elif precision + recall == 0:
        f1 = 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return precision, recall, f1


@dataclass
class CriterionResult:
    threshold: float
    precision: float | None
    recall: float | None
    f1: float | None
    tp: int
    fp: int
    fn: int
    tn: int
    sweep: list[tuple[float, float]] = field(default_factory=list)

    def summary(self) -> dict:
        return {k: getattr(self, k) for k in ("threshold", "precision", "recall", "f1", "tp", "fp", "fn", "tn")}


@dataclass
class EvalReport:
    results: dict  # criterion -> CriterionResult

    def summary(self) -> dict:
        return {c: r.summary() for c, r in self.results.items()}


def f1_sweep(values, truth) -> list[tuple[float, float]]:
    """F1 when flagging ``values > t`` for every distinct ``t``, plus one flag-all point."""
    values = np.asarray(values, dtype=float)
    truth = np.asarray(truth, dtype=bool)
    order = np.argsort(values, kind="stable")
    v, t = values[order], truth[order]
    n, pos = len(v), int(t.sum())
    distinct = np.unique(v)
    cut = np.searchsorted(v, distinct, side="right")  # items <= threshold
    pos_below = np.concatenate([[0], np.cumsum(t)])[cut]
    points = [(float(distinct[0]) - 1.0, _prf(pos, n - pos, 0)[2] or 0.0)]
    for thr, c, pb in zip(distinct, cut, pos_below):
        tp = pos - int(pb)
        fp = (n - int(c)) - tp
        f1 = _prf(tp, fp, pos - tp)[2]
        points.append((float(thr), 0.0 if f1 is None else f1))
    return points


def best_f1_threshold(values, truth) -> float:
    sweep = f1_sweep(values, truth)
    return max(sweep, key=lambda p: p[1])[0]


def evaluate(report: ScoreReport, truth=None, sweep: bool = True) -> EvalReport:
    """Precision, recall and F1 for both criteria at the report's thresholds.

    Precision or recall with a zero denominator is ``None`` rather than 0.
    """
    truth = report.truth if truth is None else np.asarray(truth, dtype=bool)
    if truth is None or len(truth) != len(report):
        raise ValueError("every scored sample needs a ground-truth label")
    results = {}
    for c in CRITERIA:
        if c not in report.thresholds:
            continue
        flagged = report.flags(c)
        tp = int(np.sum(flagged & truth))
        fp = int(np.sum(flagged & ~truth))
        fn = int(np.sum(~flagged & truth))
        tn = int(np.sum(~flagged & ~truth))
        p, r, f1 = _prf(tp, fp, fn)
        results[c] = CriterionResult(report.thresholds[c], p, r, f1, tp, fp, fn, tn,
                                     f1_sweep(report.values(c), truth) if sweep else [])
    return EvalReport(results)


def mean_metrics(reports: list[EvalReport]) -> dict:
    """Mean precision, recall and F1 per criterion over per-inlier-class runs."""
    out = {}
    for c in CRITERIA:
        rows = [r.results[c] for r in reports if c in r.results]
        if not rows:
            continue
        entry = {}
        for key in ("precision", "recall", "f1"):
            vals = [getattr(row, key) for row in rows if getattr(row, key) is not None]
            entry[f"mean_{key}"] = float(np.mean(vals)) if vals else None
        out[c] = entry
    return out
