"""The matched-F1 metric protocol on hand-built records.

Covers Hungarian matching, the 10-threshold pmF1, presence MCC, the gated
product cgF1, the per-sample macro score, and Pass@k over stored
candidates. Ends with the arithmetic consistency check against published
result-table rows (cgF1 = pmF1 x MCC up to display rounding).

Run: python demos/04_metrics.py
"""

import numpy as np

from groundling.evalkit import (EvalInstance, EvalRecord, cgf1, evaluate,
                                hungarian_match, pass_at_k)


def box_mask(r0, c0, r1, c1, side=32):
    m = np.zeros((side, side), bool)
    m[r0:r1, c0:c1] = True
    return m


def inst(mask):
    from groundling.geometry import mask_to_box
    c, s = mask_to_box(mask)
    return EvalInstance((c.x, c.y), (s.w, s.h), mask)


print("Hungarian on [[0.9, 0.1], [0.2, 0.8]]:",
      hungarian_match(np.array([[0.9, 0.1], [0.2, 0.8]])))

gt_a = inst(box_mask(4, 4, 14, 14))
pred_good = inst(box_mask(4, 4, 14, 14))       # IoU 1.0
pred_near = inst(box_mask(4, 4, 14, 12))       # IoU 0.8
pred_off = inst(box_mask(20, 20, 30, 30))      # IoU 0.0

records = [
    EvalRecord("im0", "square", [gt_a], [[pred_good]]),           # exact hit
    EvalRecord("im1", "square", [gt_a], [[pred_near, pred_off]]),  # hit + FP
    EvalRecord("im2", "circle", [], [[]]),                         # true negative
    EvalRecord("im3", "circle", [], [[pred_off]]),                 # presence FP
]
report = evaluate(records)
print(f"\npmF1 {report.pmf1:.3f}  IL_MCC {report.il_mcc:.3f} "
      f"cgF1 {report.cgf1:.3f}  macro-F1 {report.macro_f1:.3f}")
print("per threshold:", {f"{t:.2f}": round(v, 3)
                         for t, v in sorted(report.pmf1_per_threshold.items())})

# pass@k: candidate 0 misses, candidate 1 is perfect
multi = [EvalRecord("im0", "square", [gt_a], [[pred_off], [pred_good]])]
for k in (1, 2):
    print(f"pass@{k} macro-F1: {evaluate(multi, k=k).macro_f1:.3f}")
print("pass_at_k on raw score lists [0.2, 0.9, 0.4], k=2:",
      pass_at_k([[0.2, 0.9, 0.4]], 2))

# published-table arithmetic: the gated metric is the product of the two
rows = [  # (printed cgF1, pmF1, MCC): the Average column across passes
    (54.2, 66.1, 0.82), (34.7, 62.9, 0.55), (40.5, 64.6, 0.63),
    (48.1, 67.8, 0.71), (51.8, 68.9, 0.75), (54.3, 69.8, 0.78),
]
print("\nresult-table consistency (recomputed vs printed):")
for printed, pm, mcc in rows:
    again = cgf1(pm, mcc)
    print(f"  {pm:5.1f} x {mcc:4.2f} = {again:5.2f}  vs printed {printed:5.1f} "
          f"(|delta| = {abs(again - printed):.3f})")
