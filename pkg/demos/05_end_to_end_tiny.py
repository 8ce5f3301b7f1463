"""A couple of minutes of CPU training on a tiny corpus, then inference.

Not the acceptance-grade run (see tests/test_acceptance.py and the README
recipe for that); this is the smallest loop that shows all the moving
parts: generate scenes, train stage 1 + a short stage 2, decode a few
held-out prompts greedily and with sampling, and print metric reports.

Run: python demos/05_end_to_end_tiny.py   (~3 minutes on a laptop CPU)
"""

import time

import numpy as np

from groundling.evalkit import EvalInstance, EvalRecord, evaluate
from groundling.model import ModelConfig, decode
from groundling.synthdata import SceneSpec, generate_queries, generate_scene
from groundling.training import (OptimizerConfig, StageConfig, TrainSample, train)


def build(n, seed0, n_pos=2):
    data, scenes = [], []
    for s in range(seed0, seed0 + n):
        scene = generate_scene(SceneSpec(seed=s))
        queries, _ = generate_queries(scene, n_pos=n_pos)
        if not queries:
            continue
        data.append(TrainSample(
            scene.image,
            [(q.prompt, [scene.instances[i].to_instance() for i in q.target_ids])
             for q in queries], sample_id=scene.image_id))
        scenes.append((scene, queries))
    return data, scenes


train_data, _ = build(300, seed0=0)
_, heldout = build(12, seed0=50_000)
print(f"{len(train_data)} training scenes, {len(heldout)} held-out")

cfg = ModelConfig()
stages = [StageConfig(1, 100, "full_ar", True, 1e-3, 6e-4, steps=220, warmup=20),
          StageConfig(2, 150, "query_masked", False, 6e-4, 2e-4, steps=120, warmup=0)]
t0 = time.time()
params, log = train(
    train_data, cfg, stages, OptimizerConfig(grad_clip=10.0), seed=0,
    c_max=512, max_samples_per_step=6, train_factor=2, log_every=50,
    progress=lambda r: print(f"  stage {r['stage']} step {r['step']:4d} "
                             f"lm {r['lm']:.2f} coord {r['coord']:.2f} "
                             f"total {r['total']:.1f}", flush=True))
print(f"trained in {time.time() - t0:.0f}s")


def records_for(mode, k, seed=0):
    recs = []
    for scene, queries in heldout:
        prompts = [q.prompt for q in queries]
        candidates = [decode(params, cfg, scene.image, prompts,
                             mode=("greedy" if c == 0 else mode),
                             max_instances=8, upsample_factor=4, seed=seed + c)
                      for c in range(k)]
        for i, q in enumerate(queries):
            gt = [EvalInstance((scene.instances[t].center.x, scene.instances[t].center.y),
                               (scene.instances[t].size.w, scene.instances[t].size.h),
                               scene.instances[t].mask) for t in q.target_ids]
            cands = [[EvalInstance(inst.center, inst.size, inst.mask)
                      for inst in candidates[c][i].instances] for c in range(k)]
            recs.append(EvalRecord(scene.image_id, q.prompt, gt, cands))
    return recs


greedy = evaluate(records_for("greedy", 1))
print(f"\ngreedy: macro-F1 {greedy.macro_f1:.3f}  pmF1 {greedy.pmf1:.3f} "
      f"IL_MCC {greedy.il_mcc:.3f}")

sampled = records_for("sample", 4)
for k in (1, 2, 4):
    rep = evaluate(sampled, k=k)
    print(f"pass@{k}: macro-F1 {rep.macro_f1:.3f}")
print("\n(the acceptance run trains ~5x longer on ~7x more scenes)")
