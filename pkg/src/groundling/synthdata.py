"""Deterministic synthetic shapes corpus: scenes, leveled prompts, hard
negatives, and the dense split.

Scenes are crisp (no anti-aliasing) so instance masks are exact pixel sets;
centers and sizes come from the tight bounding box of each mask, keeping
every supervision signal mutually consistent. Prompts are minted per level:

* level 0: bare class nouns ("circle");
* level 1: color + class ("red circle");
* level 3: spatial superlatives resolved geometrically ("leftmost circle").

Negatives are drawn 1:1 against positives from absent classes (semantic)
and present-class/absent-color combinations (hard). Levels 2 (in-image
text) and 4 (relations) are reserved enum values: readable text does not
fit a 64px canvas, so they are not synthesized at desk scale.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .geometry import Center, Size2D, mask_to_box, rle_encode, rle_decode
from .seqformat import Instance

__all__ = [
    "CLASSES",
    "COLOR_VALUES",
    "SceneSpec",
    "SceneInstance",
    "Scene",
    "QuerySpec",
    "generate_scene",
    "generate_queries",
    "eval_prompt",
    "emit_dataset",
    "load_dataset",
    "split_of_seed",
]

CLASSES = ("circle", "square", "triangle")
COLOR_VALUES = {
    "red": (220, 40, 40),
    "green": (40, 190, 70),
    "blue": (55, 90, 230),
    "yellow": (235, 215, 60),
    "purple": (150, 60, 205),
}
BACKGROUND = (26, 26, 30)
SUPERLATIVES = ("leftmost", "rightmost", "topmost", "bottommost")
LEVELS = (0, 1, 3)  # 2 (OCR) and 4 (relations) reserved, not synthesized


@dataclass(frozen=True)
class SceneSpec:
    """Seeded recipe for one scene; dense scenes crowd one class."""

    seed: int
    size: int = 64
    min_shapes: int = 2
    max_shapes: int = 6
    dense: bool = False
    dense_min: int = 24
    dense_max: int = 40

    def __post_init__(self):
        if self.size < 16:
            raise ValueError("canvas too small")
        if self.min_shapes < 1 or self.max_shapes < self.min_shapes:
            raise ValueError("bad shape count range")


@dataclass
class SceneInstance:
    cls: str
    color: str
    center: Center
    size: Size2D
    mask: np.ndarray

    def to_instance(self) -> Instance:
        return Instance(self.center, self.size, self.mask)


@dataclass
class Scene:
    spec: SceneSpec
    image: np.ndarray
    instances: list[SceneInstance]

    @property
    def image_id(self) -> str:
        return f"scene{self.spec.seed:08d}"


def _shape_mask(cls: str, cx: float, cy: float, half: float, size: int) -> np.ndarray:
    """Exact pixel predicate per shape; pixel centers at integer + 0.5."""
    yy, xx = np.mgrid[0:size, 0:size]
    px = xx + 0.5
    py = yy + 0.5
    if cls == "circle":
        return (px - cx) ** 2 + (py - cy) ** 2 <= half ** 2
    if cls == "square":
        return (np.abs(px - cx) <= half) & (np.abs(py - cy) <= half)
    if cls == "triangle":  # isoceles, apex up
        inside_y = (py >= cy - half) & (py <= cy + half)
        return inside_y & (np.abs(px - cx) <= (py - (cy - half)) / 2.0)
    raise ValueError(f"unknown class {cls}")


def generate_scene(spec: SceneSpec) -> Scene:
    """Rasterize one scene; bit-reproducible for a given spec."""
    rng = np.random.default_rng(spec.seed)
    size = spec.size
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    occupied = np.zeros((size, size), dtype=bool)
    instances: list[SceneInstance] = []

    if spec.dense:
        n_target = int(rng.integers(spec.dense_min, spec.dense_max + 1))
        main_cls = str(rng.choice(CLASSES))
        half_range = (2.5, 4.0)
        max_tries = 4000
    else:
        n_target = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
        main_cls = None
        half_range = (5.0, 11.0)
        max_tries = 400

    tries = 0
    while len(instances) < n_target and tries < max_tries:
        tries += 1
        cls = main_cls if spec.dense else str(rng.choice(CLASSES))
        color = str(rng.choice(list(COLOR_VALUES)))
        half = float(rng.uniform(*half_range))
        cx = float(rng.uniform(half + 1, size - half - 1))
        cy = float(rng.uniform(half + 1, size - half - 1))
        mask = _shape_mask(cls, cx, cy, half, size)
        if not mask.any():
            continue
        # 1px margin so instances stay visually separable
        y0, x0 = np.nonzero(mask)
        pad = np.zeros_like(mask)
        pad[np.clip(y0 - 1, 0, size - 1), x0] = True
        pad[np.clip(y0 + 1, 0, size - 1), x0] = True
        pad[y0, np.clip(x0 - 1, 0, size - 1)] = True
        pad[y0, np.clip(x0 + 1, 0, size - 1)] = True
        if (occupied & (mask | pad)).any():
            continue
        occupied |= mask
        img[mask] = COLOR_VALUES[color]
        center, sz = mask_to_box(mask)
        instances.append(SceneInstance(cls, color, center, sz, mask))

    if spec.dense and len(instances) < spec.dense_min:
        raise RuntimeError(f"could not place {spec.dense_min} dense instances (seed {spec.seed})")
    return Scene(spec, img, instances)


@dataclass(frozen=True)
class QuerySpec:
    """One prompt: its level, polarity and the exact target instance ids."""

    level: int
    prompt: str
    polarity: bool
    target_ids: tuple[int, ...] = ()

    def __post_init__(self):
        if self.polarity != bool(self.target_ids):
            raise ValueError("positive iff nonempty targets")
        if self.level not in (0, 1, 2, 3, 4):
            raise ValueError(f"bad level {self.level}")


def _superlative_target(instances, ids, kind: str) -> int:
    key = {
        "leftmost": lambda i: (instances[i].center.x, i),
        "rightmost": lambda i: (-instances[i].center.x, i),
        "topmost": lambda i: (instances[i].center.y, i),
        "bottommost": lambda i: (-instances[i].center.y, i),
    }[kind]
    return min(ids, key=key)


def generate_queries(scene: Scene, levels=LEVELS, n_pos: int = 2,
                     rng=None) -> tuple[list[QuerySpec], list[str]]:
    """Mint up to n_pos positives and exactly as many negatives.

    Returns (queries, skipped) where skipped lists level pools that could
    not be minted for this scene (too homogeneous). Positive and negative
    counts are always equal; order is deterministic given rng.
    """
    rng = rng or np.random.default_rng(scene.spec.seed + 1)
    inst = scene.instances
    by_cls: dict[str, list[int]] = {}
    by_cc: dict[tuple[str, str], list[int]] = {}
    for i, it in enumerate(inst):
        by_cls.setdefault(it.cls, []).append(i)
        by_cc.setdefault((it.color, it.cls), []).append(i)

    pos_pool: list[QuerySpec] = []
    neg_pool: list[QuerySpec] = []
    skipped: list[str] = []

    if 0 in levels:
        for cls, ids in sorted(by_cls.items()):
            pos_pool.append(QuerySpec(0, cls, True, tuple(ids)))
        for cls in CLASSES:
            if cls not in by_cls:
                neg_pool.append(QuerySpec(0, cls, False))
        if not any(q.level == 0 for q in pos_pool):
            skipped.append("level0: no instances")

    if 1 in levels:
        for (color, cls), ids in sorted(by_cc.items()):
            pos_pool.append(QuerySpec(1, f"{color} {cls}", True, tuple(ids)))
        for cls in sorted(by_cls):  # hard: class present, color absent
            for color in COLOR_VALUES:
                if (color, cls) not in by_cc:
                    neg_pool.append(QuerySpec(1, f"{color} {cls}", False))
        for cls in CLASSES:  # semantic: class absent entirely
            if cls not in by_cls:
                color = str(rng.choice(list(COLOR_VALUES)))
                neg_pool.append(QuerySpec(1, f"{color} {cls}", False))

    if 3 in levels:
        minted = False
        for cls, ids in sorted(by_cls.items()):
            if len(ids) < 2:
                continue  # superlative degenerates to level 0
            for kind in SUPERLATIVES:
                target = _superlative_target(inst, ids, kind)
                pos_pool.append(QuerySpec(3, f"{kind} {cls}", True, (target,)))
                minted = True
        for cls in CLASSES:
            if cls not in by_cls:
                kind = str(rng.choice(SUPERLATIVES))
                neg_pool.append(QuerySpec(3, f"{kind} {cls}", False))
        if not minted:
            skipped.append("level3: no class with >= 2 instances")

    n = min(n_pos, len(pos_pool), len(neg_pool))
    if n == 0:
        return [], skipped + ["no balanced pools"]
    pos = [pos_pool[i] for i in rng.choice(len(pos_pool), size=n, replace=False)]
    neg = [neg_pool[i] for i in rng.choice(len(neg_pool), size=n, replace=False)]
    queries = pos + neg
    order = rng.permutation(len(queries))
    return [queries[i] for i in order], skipped


def eval_prompt(instances: list[SceneInstance], prompt: str) -> tuple[int, ...]:
    """Independent predicate evaluator: which instances satisfy the prompt.

    Used by tests to cross-check generated target ids; intentionally not
    shared with generate_queries' construction logic.
    """
    words = prompt.split()
    if len(words) == 1:
        cls = words[0]
        if cls not in CLASSES:
            raise ValueError(f"unknown class {cls!r}")
        return tuple(i for i, it in enumerate(instances) if it.cls == cls)
    if len(words) == 2 and words[0] in COLOR_VALUES:
        color, cls = words
        return tuple(i for i, it in enumerate(instances)
                     if it.cls == cls and it.color == color)
    if len(words) == 2 and words[0] in SUPERLATIVES:
        kind, cls = words
        ids = [i for i, it in enumerate(instances) if it.cls == cls]
        if not ids:
            return ()
        return (_superlative_target(instances, ids, kind),)
    raise ValueError(f"cannot interpret prompt {prompt!r}")


def split_of_seed(seed: int, val_fraction: float = 0.1) -> str:
    """Deterministic train/val split by a Knuth-style seed hash."""
    h = (seed * 2654435761) % (2 ** 32)
    return "val" if (h % 1000) < int(val_fraction * 1000) else "train"


def emit_dataset(specs: list[SceneSpec], out_dir, n_pos: int = 2,
                 levels=LEVELS, val_fraction: float = 0.1) -> dict:
    """Write PNGs, gt.jsonl (eval schema), annotations.jsonl and a manifest.

    Re-emitting with the same specs produces byte-identical files.
    """
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    counts = {"scenes": 0, "queries": 0, "positives": 0,
              "by_level": {str(l): 0 for l in (0, 1, 3)}}
    splits = {"train": [], "val": []}
    skipped_log: list[str] = []

    gt_path = os.path.join(out_dir, "gt.jsonl")
    ann_path = os.path.join(out_dir, "annotations.jsonl")
    with open(gt_path, "w") as gt_fh, open(ann_path, "w") as ann_fh:
        for spec in specs:
            scene = generate_scene(spec)
            queries, skipped = generate_queries(scene, levels=levels, n_pos=n_pos)
            skipped_log.extend(f"{scene.image_id}: {s}" for s in skipped)
            if not queries:
                continue
            image_id = scene.image_id
            split = split_of_seed(spec.seed, val_fraction)
            splits[split].append(image_id)
            fname = f"{image_id}.png"
            Image.fromarray(scene.image).save(os.path.join(img_dir, fname))

            ann = {
                "image_id": image_id,
                "file": f"images/{fname}",
                "split": split,
                "dense": spec.dense,
                "instances": [{
                    "cls": it.cls,
                    "color": it.color,
                    "box": [it.center.x, it.center.y, it.size.w, it.size.h],
                    "mask": rle_encode(it.mask),
                } for it in scene.instances],
                "queries": [{
                    "prompt": q.prompt, "level": q.level,
                    "target_ids": list(q.target_ids),
                } for q in queries],
            }
            ann_fh.write(json.dumps(ann) + "\n")

            for q in queries:
                rec = {
                    "image_id": image_id,
                    "phrase": q.prompt,
                    "level": q.level,
                    "split": split,
                    "dense": spec.dense,
                    "instances": [{
                        "box": [inst.center.x, inst.center.y, inst.size.w, inst.size.h],
                        "mask": rle_encode(inst.mask),
                    } for inst in (scene.instances[i] for i in q.target_ids)],
                }
                gt_fh.write(json.dumps(rec) + "\n")
                counts["queries"] += 1
                counts["positives"] += int(q.polarity)
                counts["by_level"][str(q.level)] += 1
            counts["scenes"] += 1

    manifest = {
        "canvas": specs[0].size if specs else 0,
        "dense": bool(specs and specs[0].dense),
        "seeds": [s.seed for s in specs],
        "n_pos_per_scene": n_pos,
        "levels": list(levels),
        "counts": counts,
        "splits": splits,
        "skipped": skipped_log,
        "files": {"gt": "gt.jsonl", "annotations": "annotations.jsonl",
                  "images": "images/"},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_dataset(dataset_dir, split: str | None = None):
    """Read annotations back into (image, queries) training samples.

    Returns a list of dicts: image (uint8), image_id, split, dense flag and
    queries [(prompt, level, [Instance, ...])].
    """
    ann_path = os.path.join(dataset_dir, "annotations.jsonl")
    out = []
    with open(ann_path) as fh:
        for line in fh:
            ann = json.loads(line)
            if split is not None and ann["split"] != split:
                continue
            img = np.asarray(Image.open(os.path.join(dataset_dir, ann["file"])).convert("RGB"))
            instances = []
            for it in ann["instances"]:
                cx, cy, w, h = it["box"]
                instances.append(Instance(Center(cx, cy), Size2D(w, h),
                                          rle_decode(it["mask"])))
            queries = [(q["prompt"], q["level"],
                        [instances[i] for i in q["target_ids"]])
                       for q in ann["queries"]]
            out.append({"image_id": ann["image_id"], "image": img,
                        "split": ann["split"], "dense": ann.get("dense", False),
                        "queries": queries})
    return out
