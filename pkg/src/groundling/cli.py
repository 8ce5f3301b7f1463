"""Single executable for the whole pipeline.

Subcommands: gen-data, train, infer, eval, selfcheck, sweep. Every
subcommand is deterministic given --seed; the effective configuration is
echoed into the output directory for provenance. Exit codes: 0 success,
1 runtime failure, 2 usage/config error.

Heavy imports happen inside the command handlers so that --threads can cap
BLAS workers before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field

__all__ = ["main", "RunConfig"]

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


@dataclass
class RunConfig:
    """Effective configuration of one CLI invocation."""

    subcommand: str
    seed: int
    out_dir: str | None
    values: dict = field(default_factory=dict)

    def echo(self, extra: dict | None = None):
        if not self.out_dir:
            return
        os.makedirs(self.out_dir, exist_ok=True)
        payload = {"subcommand": self.subcommand, "seed": self.seed,
                   **self.values, **(extra or {})}
        with open(os.path.join(self.out_dir, "run_config.json"), "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")


class UsageError(ValueError):
    pass


def _merge_config(defaults: dict, config_path: str | None, overrides: list[str]) -> dict:
    """defaults <- config file <- --set key=value; unknown keys rejected."""
    values = dict(defaults)

    def apply(key: str, val, origin: str):
        if key not in values:
            raise UsageError(f"unknown config key {key!r} ({origin}); "
                             f"known: {', '.join(sorted(values))}")
        values[key] = val

    if config_path:
        try:
            with open(config_path) as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {config_path}: {e}") from e
        for k, v in loaded.items():
            apply(k, v, config_path)
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        try:
            val = json.loads(raw)
        except json.JSONDecodeError:
            val = raw
        apply(key.strip(), val, "--set")
    return values


TRAIN_DEFAULTS = {
    "layers": 4, "d_model": 64, "n_heads": 4, "bins": 1024, "patch": 8,
    "image_size": 64, "upsample_factor": 4, "head_hidden": 192,
    "param_seed": 0, "fourier_seed": 1234,
    "c_max": 512, "max_samples_per_step": 6, "train_factor": 4,
    "stage1_steps": 1400, "stage2_steps": 900, "stage3_steps": 220,
    "stage1_lr": [1e-3, 4e-4], "stage2_lr": [4e-4, 8e-5], "stage3_lr": 3e-5,
    "optimizer": "adamw", "grad_clip": 10.0, "weight_decay": 0.01,
    "head_lr_mult": 3.0,
    # desk-scale: the Gram teacher would be the random init, so it is off
    # by default here; the LossWeights class default stays at 0.1
    "focal_weight": 200.0, "dice_weight": 10.0, "gram_weight": 0.0,
    "focal_gamma": 2.0, "inject_jitter": 0.12, "log_every": 25,
}

GEN_DEFAULTS = {
    "scenes": 200, "size": 64, "n_pos": 2, "val_fraction": 0.1,
    "min_shapes": 2, "max_shapes": 6, "dense": False, "levels": [0, 1, 3],
}

SWEEP_DEFAULTS = {
    "widths": [], "d_ref": 64, "lr_ref": 4e-4, "steps": 120,
    "scenes": 120, "eval_scenes": 16, "head_dim": 16,
}


def _model_cfg(values: dict, dtype: str = "float32"):
    from .model import ModelConfig
    return ModelConfig(
        layers=values["layers"], d_model=values["d_model"], n_heads=values["n_heads"],
        bins=values["bins"], patch=values["patch"], image_size=values["image_size"],
        upsample_factor=values["upsample_factor"], head_hidden=values["head_hidden"],
        param_seed=values["param_seed"], fourier_seed=values["fourier_seed"],
        dtype=dtype)


def _load_train_samples(data_dir: str, split: str = "train"):
    from .synthdata import load_dataset
    from .training import TrainSample
    out = []
    for entry in load_dataset(data_dir, split=split):
        queries = [(prompt, insts) for prompt, _level, insts in entry["queries"]]
        out.append(TrainSample(entry["image"], queries, sample_id=entry["image_id"]))
    return out


def cmd_gen_data(args) -> int:
    from .synthdata import SceneSpec, emit_dataset
    values = _merge_config(GEN_DEFAULTS, args.config, args.set)
    if args.dense:
        values["dense"] = True
    rc = RunConfig("gen-data", args.seed, args.out, values)
    specs = [SceneSpec(seed=args.seed * 1_000_000 + i, size=values["size"],
                       min_shapes=values["min_shapes"], max_shapes=values["max_shapes"],
                       dense=values["dense"])
             for i in range(values["scenes"])]
    manifest = emit_dataset(specs, args.out, n_pos=values["n_pos"],
                            levels=tuple(values["levels"]),
                            val_fraction=values["val_fraction"])
    rc.echo()
    c = manifest["counts"]
    print(f"wrote {c['scenes']} scenes / {c['queries']} queries to {args.out} "
          f"(train {len(manifest['splits']['train'])}, val {len(manifest['splits']['val'])})")
    return EXIT_OK


def cmd_train(args) -> int:
    values = _merge_config(TRAIN_DEFAULTS, args.config, args.set)
    rc = RunConfig("train", args.seed, args.out, values)
    from .losses import LossWeights
    from .model import load_checkpoint
    from .training import OptimizerConfig, StageConfig, train

    stage_ids = [int(s) for s in args.stages.split(",")] if args.stages else [1, 2, 3]
    if any(s not in (1, 2, 3) for s in stage_ids):
        raise UsageError(f"--stages must be among 1,2,3, got {args.stages}")
    all_stages = {
        1: StageConfig(1, 100, "full_ar", True, *values["stage1_lr"], values["stage1_steps"]),
        2: StageConfig(2, 150, "query_masked", False, *values["stage2_lr"], values["stage2_steps"]),
        3: StageConfig(3, 600, "query_masked", False, values["stage3_lr"], values["stage3_lr"],
                       values["stage3_steps"], warmup=0),
    }
    stages = [all_stages[s] for s in sorted(stage_ids)]

    cfg = _model_cfg(values)
    if args.dry_run:
        rc.echo({"dry_run": True, "stages": [s.stage for s in stages]})
        print("config OK (dry run):", json.dumps(values, sort_keys=True))
        return EXIT_OK

    dataset = _load_train_samples(args.data, "train")
    dense = _load_train_samples(args.dense_data, "train") if args.dense_data else None
    params = None
    if args.resume:
        cfg, params = load_checkpoint(args.resume, requires_grad=True)

    weights = LossWeights(dice=values["dice_weight"], focal=values["focal_weight"],
                          gram=values["gram_weight"], focal_gamma=values["focal_gamma"])
    opt_cfg = OptimizerConfig(name=values["optimizer"], weight_decay=values["weight_decay"],
                              grad_clip=values["grad_clip"],
                              head_lr_mult=values["head_lr_mult"])
    rc.echo({"stages": [s.stage for s in stages], "n_train": len(dataset)})

    def progress(row):
        comps = " ".join(f"{k}={row[k]:.3f}" for k in ("lm", "coord", "size", "total"))
        print(f"stage {row['stage']} step {row['step']:5d} lr {row['lr']:.2e} {comps}",
              flush=True)

    train(dataset, cfg, stages, opt_cfg, seed=args.seed, out_dir=args.out,
          c_max=values["c_max"], max_samples_per_step=values["max_samples_per_step"],
          train_factor=values["train_factor"], weights=weights,
          dense_dataset=dense, params=params, log_every=values["log_every"],
          inject_jitter=values["inject_jitter"], progress=progress)
    print(f"checkpoint and log written to {args.out}")
    return EXIT_OK


def _decode_seed(base: int, image_id: str, k: int) -> int:
    import zlib
    return (base * 10_000_019 + zlib.crc32(image_id.encode()) + 7 * k) % (2 ** 31)


def cmd_infer(args) -> int:
    import numpy as np
    from PIL import Image as PILImage
    from .geometry import rle_encode
    from .model import decode, load_checkpoint, resize_image

    cfg, params = load_checkpoint(args.ckpt)
    gt_path = os.path.join(args.data, "gt.jsonl")
    wanted: dict[str, list[str]] = {}
    order: list[tuple[str, str]] = []
    with open(gt_path) as fh:
        for line in fh:
            rec = json.loads(line)
            if args.split and rec.get("split") != args.split:
                continue
            if args.levels and rec.get("level") not in args.levels:
                continue
            wanted.setdefault(rec["image_id"], []).append(rec["phrase"])
            order.append((rec["image_id"], rec["phrase"]))

    if not order:
        raise RuntimeError(f"no records matched split={args.split!r} levels={args.levels}")

    out_rows: dict[tuple[str, str], dict] = {}
    temps = (args.temp_lang, args.temp_coord, args.temp_size)
    n_candidates = max(1, args.k)
    for image_id, phrases in wanted.items():
        img = np.asarray(PILImage.open(
            os.path.join(args.data, "images", f"{image_id}.png")).convert("RGB"))
        if args.resize == "fixed" and img.shape[0] != cfg.image_size:
            img = np.clip(resize_image(img.astype(np.float64), (cfg.image_size, cfg.image_size)),
                          0, 255).astype(np.uint8)
        candidate_sets = []
        for k in range(n_candidates):
            mode = "greedy" if (k == 0 or args.mode == "greedy") else "sample"
            res = decode(params, cfg, img, phrases, mode=mode, temperatures=temps,
                         max_instances=args.max_instances, boxes_only=args.boxes_only,
                         upsample_factor=args.upsample_factor,
                         seed=_decode_seed(args.seed, image_id, k))
            candidate_sets.append(res)
        for i, phrase in enumerate(phrases):
            cands = []
            for k in range(n_candidates):
                r = candidate_sets[k][i]
                insts = []
                for inst in r.instances:
                    row = {"box": [inst.center[0], inst.center[1], inst.size[0], inst.size[1]]}
                    if not args.boxes_only and inst.mask is not None:
                        row["mask"] = rle_encode(inst.mask)
                    insts.append(row)
                cands.append(insts)
            rec = {"image_id": image_id, "phrase": phrase}
            if n_candidates == 1:
                rec["instances"] = cands[0]
            else:
                rec["candidates"] = cands
            out_rows[(image_id, phrase)] = rec

    os.makedirs(os.path.dirname(os.path.abspath(args.out)) or ".", exist_ok=True)
    with open(args.out, "w") as fh:
        for key in order:
            fh.write(json.dumps(out_rows[key]) + "\n")

    if args.overlays:
        _write_overlays(args, wanted, out_rows)
    print(f"wrote {len(order)} prediction records to {args.out}")
    return EXIT_OK


def _write_overlays(args, wanted, out_rows) -> None:
    import numpy as np
    from PIL import Image as PILImage
    from .geometry import rle_decode
    os.makedirs(args.overlays, exist_ok=True)
    palette = [(255, 80, 80), (80, 255, 120), (100, 140, 255), (250, 230, 90),
               (220, 120, 255), (90, 230, 230)]
    for image_id, phrases in wanted.items():
        img = np.asarray(PILImage.open(
            os.path.join(args.data, "images", f"{image_id}.png")).convert("RGB")).copy()
        for phrase in phrases:
            rec = out_rows[(image_id, phrase)]
            insts = rec.get("instances") or rec["candidates"][0]
            over = img.copy()
            for j, inst in enumerate(insts):
                if "mask" not in inst:
                    continue
                m = rle_decode(inst["mask"])
                over[m] = (0.5 * over[m] + 0.5 * np.array(palette[j % len(palette)])).astype(np.uint8)
            safe = phrase.replace(" ", "_")
            PILImage.fromarray(over).save(
                os.path.join(args.overlays, f"{image_id}__{safe}.png"))


def cmd_eval(args) -> int:
    from .evalkit import evaluate, format_report, load_records, write_report
    match_on = "box" if args.boxes_only else "mask"
    records = load_records(args.pred, args.gt, require_mask=not args.boxes_only)
    k = max(1, args.pass_at_k)
    report = evaluate(records, match_on=match_on, k=k)
    print(format_report(report, title=f"{args.pred} vs {args.gt}"))
    groups: dict[str, list] = {}
    if args.per_level:
        for rec in records:
            groups.setdefault(f"level{rec.meta.get('level', '?')}", []).append(rec)
        for name in sorted(groups):
            sub = evaluate(groups[name], match_on=match_on, k=k)
            print(format_report(sub, title=f"-- {name}"))
    if args.out:
        write_report(report, args.out)
        print(f"report written to {args.out}")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    from .verify import run_all
    results = run_all(fast=args.fast)
    for r in results:
        print(r.line(), flush=True)
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


def cmd_sweep(args) -> int:
    values = _merge_config(SWEEP_DEFAULTS, args.config, args.set)
    widths = values["widths"] or ([int(w) for w in args.widths.split(",")] if args.widths else [])
    if not widths:
        raise UsageError("sweep needs --widths, e.g. --widths 16,32")
    from .evalkit import EvalInstance, EvalRecord, evaluate
    from .losses import LossWeights
    from .model import ModelConfig, decode
    from .synthdata import SceneSpec, generate_queries, generate_scene
    from .training import (OptimizerConfig, StageConfig, TrainSample,
                           mup_lr_transfer, train)

    def build(n, seed0):
        data, scenes = [], []
        for s in range(seed0, seed0 + n):
            sc = generate_scene(SceneSpec(seed=s))
            qs, _ = generate_queries(sc, n_pos=2)
            if not qs:
                continue
            data.append(TrainSample(sc.image, [(q.prompt, [sc.instances[i].to_instance()
                                                           for i in q.target_ids])
                                               for q in qs], sample_id=sc.image_id))
            scenes.append((sc, qs))
        return data, scenes

    data, _ = build(values["scenes"], args.seed * 1_000_000)
    _, eval_scenes = build(values["eval_scenes"], args.seed * 1_000_000 + 777_000)

    rows = []
    hd = values["head_dim"]
    for width in widths:
        if width % hd:
            raise UsageError(f"width {width} not divisible by head_dim {hd}")
        lr = mup_lr_transfer(values["lr_ref"], values["d_ref"], width)
        cfg = ModelConfig(layers=4, d_model=width, n_heads=width // hd,
                          head_hidden=min(64, width))
        stages = [StageConfig(1, 100, "full_ar", True, lr, lr / 4, values["steps"])]
        params, log = train(data, cfg, stages, OptimizerConfig(grad_clip=5.0),
                            seed=args.seed, train_factor=2)
        records = []
        for sc, qs in eval_scenes:
            res = decode(params, cfg, sc.image, [q.prompt for q in qs], mode="greedy")
            for q, r in zip(qs, res):
                gt = [EvalInstance((sc.instances[i].center.x, sc.instances[i].center.y),
                                   (sc.instances[i].size.w, sc.instances[i].size.h),
                                   sc.instances[i].mask) for i in q.target_ids]
                preds = [EvalInstance(inst.center, inst.size, inst.mask)
                         for inst in r.instances]
                records.append(EvalRecord(sc.image_id, q.prompt, gt, [preds]))
        rep = evaluate(records, match_on="mask")
        rows.append({"width": width, "lr": lr, "macro_F1": rep.macro_f1,
                     "pmF1": rep.pmf1 if rep.pmf1 is not None else 0.0,
                     "final_loss": log.rows[-1]["total"] if log.rows else float("nan")})

    rows.sort(key=lambda r: -r["macro_F1"])
    header = f"{'width':>6} {'lr':>10} {'macro_F1':>9} {'pmF1':>7} {'final_loss':>11}"
    print(header)
    for r in rows:
        print(f"{r['width']:>6} {r['lr']:>10.3e} {r['macro_F1']:>9.3f} "
              f"{r['pmF1']:>7.3f} {r['final_loss']:>11.3f}")
    if args.out:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)) or ".", exist_ok=True)
        with open(args.out, "w") as fh:
            json.dump(rows, fh, indent=2)
            fh.write("\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="groundling",
        description="Desk-scale unified dense perception: data, training, inference, metrics.")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS worker threads (set before numpy loads)")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic shapes corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--dense", action="store_true", help="crowded split (>= 24 instances)")
    g.add_argument("--config", default=None)
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="run the staged training recipe")
    t.add_argument("--data", required=True)
    t.add_argument("--dense-data", default=None, help="dataset dir for stage 3")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--stages", default=None, help="comma list, e.g. 1,2")
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--dry-run", action="store_true")
    t.add_argument("--config", default=None)
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    t.set_defaults(fn=cmd_train)

    i = sub.add_parser("infer", help="decode predictions for a dataset split")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--split", default="val")
    i.add_argument("--levels", type=int, nargs="*", default=None)
    i.add_argument("--mode", choices=("greedy", "sample"), default="greedy")
    i.add_argument("--k", type=int, default=1,
                   help="candidate sets per record (first is always greedy)")
    i.add_argument("--temp-lang", type=float, default=0.7)
    i.add_argument("--temp-coord", type=float, default=0.7)
    i.add_argument("--temp-size", type=float, default=0.7)
    i.add_argument("--boxes-only", action="store_true",
                   help="skip the upsampler: detection-only decoding")
    i.add_argument("--upsample-factor", type=int, default=None)
    i.add_argument("--resize", choices=("fixed", "adaptive"), default="adaptive")
    i.add_argument("--max-instances", type=int, default=600)
    i.add_argument("--overlays", default=None, help="directory for mask overlay PNGs")
    i.set_defaults(fn=cmd_infer)

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--pass-at-k", type=int, default=1)
    e.add_argument("--boxes-only", action="store_true", help="match on boxes, not masks")
    e.add_argument("--per-level", action="store_true")
    e.add_argument("--out", default=None, help="write the JSON report here")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("selfcheck", help="gradient/partition/packing/matcher oracles")
    s.add_argument("--fast", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_selfcheck)

    w = sub.add_parser("sweep", help="width sweep with sqrt-width lr transfer")
    w.add_argument("--widths", default=None, help="comma list, e.g. 16,32,64")
    w.add_argument("--seed", type=int, default=0)
    w.add_argument("--out", default=None)
    w.add_argument("--config", default=None)
    w.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    w.set_defaults(fn=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError, RuntimeError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
