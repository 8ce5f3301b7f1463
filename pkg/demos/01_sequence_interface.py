"""Walk through the token interface on one synthetic scene.

Shows the serialized stream (text, presence, per-instance coord/size/seg
triplets in raster order), the hybrid attention mask in both modes, and the
parse roundtrip that inverts serialization.

Run: python demos/01_sequence_interface.py
"""

import numpy as np

from groundling.seqformat import (ROLE_NAMES, Vocab, attention_mask, pack,
                                  parse_generated, serialize_sample)
from groundling.synthdata import SceneSpec, generate_queries, generate_scene

vocab = Vocab()
scene = generate_scene(SceneSpec(seed=20))
queries, _ = generate_queries(scene, n_pos=2)
print(f"scene {scene.image_id}: "
      + ", ".join(f"{it.color} {it.cls}" for it in scene.instances))

pairs = [(q.prompt, [scene.instances[i].to_instance() for i in q.target_ids])
         for q in queries]
seq = serialize_sample((8, 8), pairs, vocab, sample_id=scene.image_id)
seq.image = scene.image

print(f"\nserialized length {len(seq)} ({seq.n_image} image tokens)")
print(f"{'pos':>4} {'token':<10} {'role':<8} {'block':>5}  label")
for i in range(seq.n_image, len(seq)):
    tok = vocab.token_name(int(seq.tokens[i]))
    lbl = int(seq.labels[i])
    lbl_name = vocab.token_name(lbl) if lbl >= 0 else "-"
    print(f"{i:>4} {tok:<10} {ROLE_NAMES[int(seq.roles[i])]:<8} "
          f"{int(seq.blocks[i]):>5}  {lbl_name}")

batch = pack([seq], 1024)[0]
for mode in ("full_ar", "query_masked"):
    mask = attention_mask(batch.attention_spec(mode))
    n = seq.n_image
    cross_block = 0
    for i in range(n, len(seq)):
        for j in range(n, i):
            if batch.blocks[i] != batch.blocks[j] and mask[i, j]:
                cross_block += 1
    print(f"\nmode {mode}: {mask.sum()} allowed pairs, "
          f"{cross_block} cross-block task-token pairs")

picks = {}
for i in range(seq.n_image, len(seq)):
    j = i - seq.n_image
    if ROLE_NAMES[int(seq.roles[i])] == "coord":
        picks[j] = tuple(seq.centers[i])
    elif ROLE_NAMES[int(seq.roles[i])] == "size":
        picks[j] = tuple(seq.sizes[i])
parsed, complete = parse_generated(seq.tokens[seq.n_image:], picks, vocab)
print(f"\nparse roundtrip: complete={complete}")
for q in parsed:
    print(f"  {q.prompt!r}: present={q.present}, {len(q.instances)} instances")
