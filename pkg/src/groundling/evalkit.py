"""Matched-F1 metric protocol and the Pass@k sampling harness.

Per (image, phrase) record, predictions are matched one-to-one to ground
truth by maximizing total IoU (Hungarian); at each threshold tau a matched
pair with IoU >= tau is a true positive, remaining predictions are false
positives and uncovered ground-truth instances are false negatives. The
headline numbers are:

* pmF1   micro-F1 over positive records, averaged over the 10 thresholds
         0.50, 0.55, ..., 0.95;
* IL_MCC Matthews correlation of the image-level presence decision
         (did the model predict any instance at all);
* cgF1   the product pmF1 * IL_MCC;
* macro-F1  mean per-record score: positives get their mean local F1 over
         thresholds, true negatives score 1, presence errors score 0.

Pass@k scores each record by the best of its first k stored candidate
predictions (selection uses the per-record score itself); candidates are
written once at inference time and never re-sampled.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import box_corners as _corners
from .geometry import Center, Size2D, box_iou, mask_iou, rle_decode, rle_encode

__all__ = [
    "DEFAULT_THRESHOLDS",
    "EvalInstance",
    "EvalRecord",
    "MetricReport",
    "hungarian_match",
    "record_counts",
    "pmf1",
    "il_mcc",
    "cgf1",
    "macro_f1",
    "pass_at_k",
    "evaluate",
    "load_records",
    "write_report",
    "format_report",
]

# exact rationals (10+i)/20 so hand-constructed IoUs like 3/5 compare cleanly
DEFAULT_THRESHOLDS = tuple((10 + i) / 20 for i in range(10))


def hungarian_match(iou_matrix: np.ndarray) -> list[tuple[int, int]]:
    """Optimal one-to-one partial assignment maximizing total IoU.

    Returns min(N, M) (row, col) pairs sorted by row. Entries must be
    nonnegative. Ties between equally optimal assignments resolve
    deterministically; the solver prefers the lowest (row, col) pairs
    (verified against exhaustive search on tie fixtures).
    """
    m = np.asarray(iou_matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"IoU matrix must be 2D, got shape {m.shape}")
    if m.size == 0:
        return []
    if np.any(m < 0) or not np.all(np.isfinite(m)):
        raise ValueError("IoU entries must be finite and nonnegative")
    rows, cols = linear_sum_assignment(-m)
    return sorted(zip(rows.tolist(), cols.tolist()))


@dataclass
class EvalInstance:
    """One predicted or ground-truth instance (normalized box, mask)."""

    center: tuple[float, float]
    size: tuple[float, float]
    mask: np.ndarray | None = None
    score: float | None = None

    @property
    def box(self) -> tuple[float, float, float, float]:
        return _corners(Center(*self.center), Size2D(*self.size))


@dataclass
class EvalRecord:
    """Per-(image, phrase) datapoint: ground truth plus >= 1 candidate sets."""

    image_id: str
    phrase: str
    gt: list[EvalInstance]
    candidates: list[list[EvalInstance]]
    meta: dict = field(default_factory=dict)

    @property
    def gt_present(self) -> bool:
        return len(self.gt) > 0

    def predictions(self, candidate: int = 0) -> list[EvalInstance]:
        return self.candidates[candidate]


def _iou_matrix(preds, gts, match_on: str) -> np.ndarray:
    out = np.zeros((len(preds), len(gts)))
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            if match_on == "mask":
                if p.mask is None or g.mask is None:
                    raise ValueError("mask matching requested but an instance has no mask")
                out[i, j] = mask_iou(p.mask, g.mask)
            else:
                out[i, j] = box_iou(p.box, g.box)
    return out


def record_counts(preds, gts, thresholds=DEFAULT_THRESHOLDS, match_on: str = "mask"):
    """Per-threshold (TP, FP, FN) and local F1 for one record's predictions."""
    n, m = len(preds), len(gts)
    if n and m:
        mat = _iou_matrix(preds, gts, match_on)
        pairs = hungarian_match(mat)
        scores = np.array([mat[i, j] for i, j in pairs])
    else:
        scores = np.zeros(0)
    tp = np.array([int((scores >= t).sum()) for t in thresholds])
    fp = n - tp
    fn = m - tp
    local_f1 = np.where(n + m > 0, 2 * tp / max(1, n + m), 0.0)
    return tp, fp, fn, local_f1


def pmf1(records, thresholds=DEFAULT_THRESHOLDS, match_on: str = "mask",
         candidate_of=None):
    """Positive micro-F1: counts accumulated across positive records only.

    Returns (mean over thresholds, {tau: F1}, {tau: (TP, FP, FN)}); None
    mean when there are no positive records.
    """
    candidate_of = candidate_of or (lambda r: 0)
    tps = np.zeros(len(thresholds), dtype=np.int64)
    fps = np.zeros(len(thresholds), dtype=np.int64)
    fns = np.zeros(len(thresholds), dtype=np.int64)
    n_pos = 0
    for rec in records:
        if not rec.gt_present:
            continue
        n_pos += 1
        tp, fp, fn, _ = record_counts(rec.predictions(candidate_of(rec)), rec.gt,
                                      thresholds, match_on)
        tps += tp
        fps += fp
        fns += fn
    if n_pos == 0:
        return None, {}, {}
    per = {}
    counts = {}
    for i, t in enumerate(thresholds):
        denom = 2 * tps[i] + fps[i] + fns[i]
        per[t] = float(2 * tps[i] / denom) if denom else 0.0
        counts[t] = (int(tps[i]), int(fps[i]), int(fns[i]))
    return float(np.mean(list(per.values()))), per, counts


def il_mcc(records, candidate_of=None) -> float:
    """Matthews correlation of the presence decision (any mask predicted)."""
    candidate_of = candidate_of or (lambda r: 0)
    tp = tn = fp = fn = 0
    for rec in records:
        pred = len(rec.predictions(candidate_of(rec))) > 0
        if rec.gt_present and pred:
            tp += 1
        elif rec.gt_present:
            fn += 1
        elif pred:
            fp += 1
        else:
            tn += 1
    denom2 = float(tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom2 == 0.0:
        return 0.0
    return float((tp * tn - fp * fn) / np.sqrt(denom2))


def cgf1(pmf1_value: float, mcc: float) -> float:
    """Classification-gated F1: the product of localization and presence."""
    return pmf1_value * mcc


def _record_score(rec: EvalRecord, candidate: int, thresholds, match_on) -> float:
    """Per-record score: mean local F1 for true positives, 1 for true
    negatives, 0 for presence errors."""
    preds = rec.predictions(candidate)
    if rec.gt_present and preds:
        _, _, _, local = record_counts(preds, rec.gt, thresholds, match_on)
        return float(local.mean())
    if not rec.gt_present and not preds:
        return 1.0
    return 0.0


def macro_f1(records, thresholds=DEFAULT_THRESHOLDS, match_on: str = "mask",
             candidate_of=None) -> float:
    """Mean per-record score over all records."""
    candidate_of = candidate_of or (lambda r: 0)
    if not records:
        raise ValueError("no records to evaluate")
    return float(np.mean([_record_score(r, candidate_of(r), thresholds, match_on)
                          for r in records]))


def pass_at_k(score_lists: list[list[float]], k: int) -> float:
    """Mean over samples of the best score among the first k candidates.

    Monotone non-decreasing in k by construction.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not score_lists:
        raise ValueError("no score lists")
    return float(np.mean([max(scores[:k]) for scores in score_lists]))


@dataclass
class MetricReport:
    pmf1: float | None
    pmf1_per_threshold: dict
    il_mcc: float
    cgf1: float | None
    macro_f1: float
    counts: dict
    n_records: int
    n_positive: int
    k: int = 1
    match_on: str = "mask"

    def to_dict(self) -> dict:
        return {
            "pmF1": self.pmf1,
            "pmF1_per_threshold": {f"{t:.2f}": v for t, v in self.pmf1_per_threshold.items()},
            "IL_MCC": self.il_mcc,
            "cgF1": self.cgf1,
            "macro_F1": self.macro_f1,
            "counts": {f"{t:.2f}": {"TP": c[0], "FP": c[1], "FN": c[2]}
                       for t, c in self.counts.items()},
            "n_records": self.n_records,
            "n_positive": self.n_positive,
            "pass_at_k": self.k,
            "match_on": self.match_on,
        }


def evaluate(records: list[EvalRecord], thresholds=DEFAULT_THRESHOLDS,
             match_on: str = "mask", k: int = 1) -> MetricReport:
    """Full metric report; k > 1 selects each record's best stored candidate
    among the first k by the per-record score (ties keep the earliest)."""
    if not records:
        raise ValueError("no records to evaluate")

    selection: dict[int, int] = {}
    for idx, rec in enumerate(records):
        kk = min(k, len(rec.candidates))
        if kk > 1:
            scores = [_record_score(rec, c, thresholds, match_on) for c in range(kk)]
            selection[idx] = int(np.argmax(scores))
        else:
            selection[idx] = 0
    by_id = {id(rec): selection[idx] for idx, rec in enumerate(records)}

    def cand(rec):
        return by_id[id(rec)]

    mean_pm, per, counts = pmf1(records, thresholds, match_on, cand)
    mcc = il_mcc(records, cand)
    return MetricReport(
        pmf1=mean_pm,
        pmf1_per_threshold=per,
        il_mcc=mcc,
        cgf1=None if mean_pm is None else cgf1(mean_pm, mcc),
        macro_f1=macro_f1(records, thresholds, match_on, cand),
        counts=counts,
        n_records=len(records),
        n_positive=sum(1 for r in records if r.gt_present),
        k=k,
        match_on=match_on,
    )


# ---------------------------------------------------------------------------
# prediction / ground-truth JSONL


def _parse_instance(obj: dict, path: str, line_no: int, require_mask: bool) -> EvalInstance:
    if not isinstance(obj, dict):
        raise ValueError(f"{path}:{line_no}: instance must be an object")
    box = obj.get("box")
    if (not isinstance(box, (list, tuple))) or len(box) != 4:
        raise ValueError(f"{path}:{line_no}: instance missing 'box' [cx, cy, w, h]")
    cx, cy, w, h = (float(v) for v in box)
    mask = None
    if "mask" in obj and obj["mask"] is not None:
        try:
            mask = rle_decode(obj["mask"])
        except ValueError as e:
            raise ValueError(f"{path}:{line_no}: bad mask RLE: {e}") from e
    elif require_mask:
        raise ValueError(f"{path}:{line_no}: instance missing 'mask'")
    score = obj.get("score")
    return EvalInstance(center=(cx, cy), size=(w, h), mask=mask,
                        score=None if score is None else float(score))


def _read_jsonl(path, require_mask: bool, allow_candidates: bool):
    out = {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{line_no}: invalid JSON: {e}") from e
            for key in ("image_id", "phrase"):
                if key not in obj:
                    raise ValueError(f"{path}:{line_no}: missing '{key}'")
            key = (str(obj["image_id"]), str(obj["phrase"]))
            if key in out:
                raise ValueError(f"{path}:{line_no}: duplicate record for {key}")
            if allow_candidates and "candidates" in obj:
                cands = [[_parse_instance(i, path, line_no, require_mask) for i in group]
                         for group in obj["candidates"]]
                if not cands:
                    raise ValueError(f"{path}:{line_no}: empty 'candidates'")
            else:
                if "instances" not in obj:
                    raise ValueError(f"{path}:{line_no}: missing 'instances'")
                cands = [[_parse_instance(i, path, line_no, require_mask)
                          for i in obj["instances"]]]
            meta = {k: v for k, v in obj.items()
                    if k not in ("image_id", "phrase", "instances", "candidates")}
            out[key] = (cands, meta, line_no)
    return out


def load_records(pred_path, gt_path, require_mask: bool = True) -> list[EvalRecord]:
    """Join prediction and ground-truth JSONL on (image_id, phrase).

    Strict: schema violations name the file and line; records present in
    only one of the two files are a join error listing the orphans.
    """
    preds = _read_jsonl(pred_path, require_mask, allow_candidates=True)
    gts = _read_jsonl(gt_path, require_mask, allow_candidates=False)
    missing_pred = sorted(set(gts) - set(preds))
    missing_gt = sorted(set(preds) - set(gts))
    if missing_pred or missing_gt:
        parts = []
        if missing_pred:
            parts.append(f"{len(missing_pred)} records missing predictions "
                         f"(first: {missing_pred[:3]})")
        if missing_gt:
            parts.append(f"{len(missing_gt)} predictions without ground truth "
                         f"(first: {missing_gt[:3]})")
        raise ValueError("join error: " + "; ".join(parts))
    records = []
    for key in sorted(gts):
        gt_cands, gt_meta, _ = gts[key]
        pred_cands, pred_meta, _ = preds[key]
        records.append(EvalRecord(image_id=key[0], phrase=key[1], gt=gt_cands[0],
                                  candidates=pred_cands, meta={**gt_meta, **pred_meta}))
    return records


def write_report(report: MetricReport, path) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")


def format_report(report: MetricReport, title: str = "") -> str:
    lines = []
    if title:
        lines.append(title)
    fmt = lambda v: "  null" if v is None else f"{v:6.3f}"
    lines.append(f"  records {report.n_records} (positive {report.n_positive})"
                 f"  match_on={report.match_on}  pass@{report.k}")
    lines.append(f"  pmF1     {fmt(report.pmf1)}")
    lines.append(f"  IL_MCC   {fmt(report.il_mcc)}")
    lines.append(f"  cgF1     {fmt(report.cgf1)}")
    lines.append(f"  macro-F1 {fmt(report.macro_f1)}")
    if report.pmf1_per_threshold:
        row = "  ".join(f"{t:.2f}:{v:.3f}" for t, v in sorted(report.pmf1_per_threshold.items()))
        lines.append(f"  pmF1@tau {row}")
    return "\n".join(lines)


def instance_to_json(inst: EvalInstance, with_mask: bool = True) -> dict:
    """Serialize an instance for the prediction/GT JSONL schema."""
    out = {"box": [float(inst.center[0]), float(inst.center[1]),
                   float(inst.size[0]), float(inst.size[1])]}
    if with_mask and inst.mask is not None:
        out["mask"] = rle_encode(inst.mask)
    if inst.score is not None:
        out["score"] = float(inst.score)
    return out
