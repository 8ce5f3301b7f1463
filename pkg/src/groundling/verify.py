"""Self-verification routines: gradient oracle, partition invariance,
packing equivalence, and the brute-force matching oracle.

These are the independent checks behind the `selfcheck` subcommand and the
acceptance tests. The finite-difference and permutation oracles here must
stay independent of the implementation paths they check: finite differences
only call the forward pass, and `brute_force_assignment` enumerates
permutations rather than calling the production matcher.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .geometry import Center, QuantConfig, Size2D
from .losses import LossWeights, combine_rank_terms
from .model import ModelConfig, forward, init_params
from .seqformat import Instance, Vocab, pack, serialize_sample
from .training import FrozenTeacher, partitioned_loss_and_grads, rank_terms_for_batch

__all__ = [
    "CheckResult",
    "brute_force_assignment",
    "tiny_fixture_samples",
    "check_gradients",
    "check_partition_invariance",
    "check_packing_equivalence",
    "check_matcher",
    "run_all",
]


@dataclass
class CheckResult:
    name: str
    passed: bool
    stat: float
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return f"[{mark}] {self.name}: {self.detail} ({self.seconds:.1f}s)"


def brute_force_assignment(matrix: np.ndarray) -> list[tuple[int, int]]:
    """Exhaustive optimal one-to-one partial assignment of size min(N, M).

    Maximizes total value; among maxima returns the lexicographically
    smallest assignment (sorted pair list compared elementwise). Intended
    as the independent oracle for the production matcher; O(max! ) so keep
    min(N, M) small.
    """
    m = np.asarray(matrix, dtype=np.float64)
    n_rows, n_cols = m.shape
    k = min(n_rows, n_cols)
    best_total, best_pairs = -np.inf, None
    for rows in itertools.combinations(range(n_rows), k):
        for cols in itertools.permutations(range(n_cols), k):
            total = float(m[list(rows), list(cols)].sum())
            pairs = sorted(zip(rows, cols))
            if total > best_total + 1e-15 or (abs(total - best_total) <= 1e-15
                                              and (best_pairs is None or pairs < best_pairs)):
                best_total, best_pairs = total, pairs
    return best_pairs or []


def tiny_fixture_samples(cfg: ModelConfig, vocab: Vocab, n_instances: int = 3,
                         seed: int = 5):
    """Two small samples (one multi-instance positive + one negative query)
    that exercise every head and every parameter tensor."""
    rng = np.random.default_rng(seed)
    side = cfg.image_size
    grid = (side // cfg.patch, side // cfg.patch)

    def sample(tag, k):
        img = (rng.random((side, side, 3)) * 255).astype(np.uint8)
        instances = []
        for _ in range(k):
            cx, cy = rng.uniform(0.2, 0.8, 2)
            w, h = rng.uniform(0.15, 0.4, 2)
            mask = np.zeros((side, side), bool)
            x0, x1 = int((cx - w / 2) * side), int((cx + w / 2) * side)
            y0, y1 = int((cy - h / 2) * side), int((cy + h / 2) * side)
            mask[max(0, y0):y1, max(0, x0):x1] = True
            instances.append(Instance(Center(cx, cy), Size2D(w, h), mask))
        seq = serialize_sample(grid, [("red box", instances), ("cat", [])],
                               vocab, sample_id=tag)
        seq.image = img
        return seq

    return [sample("a", n_instances), sample("b", max(1, n_instances - 1))]


def check_gradients(rel_tol: float = 1e-3, probes_per_tensor: int = 4,
                    seed: int = 5) -> CheckResult:
    """Analytic (tape) gradients vs central finite differences, per tensor,
    for every loss component and the total, on a 2-layer d=16 model."""
    t0 = time.time()
    cfg = ModelConfig(layers=2, d_model=16, n_heads=2, image_size=32, patch=8,
                      bins=32, head_hidden=16, dtype="float64")
    vocab = Vocab()
    params = init_params(cfg)
    samples = tiny_fixture_samples(cfg, vocab, n_instances=3, seed=seed)
    batch = pack(samples, 4096)[0]
    weights = LossWeights()
    qcfg = QuantConfig(cfg.bins)

    # teacher with features that differ from the student so gram grads != 0
    teacher = FrozenTeacher(params, cfg)
    drift_rng = np.random.default_rng(seed + 1)
    for seq in samples:
        base = teacher.features(seq.image, key=seq.sample_id)
        teacher._cache[seq.sample_id] = base + 0.1 * drift_rng.normal(size=base.shape)

    components = ("lm", "coord", "size", "focal", "dice", "gram", "total")

    def all_components():
        out = forward(params, batch, cfg, mode="full_ar", upsample_factor=2)
        terms = rank_terms_for_batch(out, batch, qcfg, weights, teacher)
        return combine_rank_terms([terms], weights)

    analytic = {}
    for comp in components:
        for p in params.values():
            p.grad = None
        ad.backward(all_components()[comp])
        analytic[comp] = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                          for k, p in params.items()}

    h = 1e-5
    worst = 0.0
    worst_where = ""
    rng = np.random.default_rng(seed + 2)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        k = min(probes_per_tensor, flat.size)
        for idx in rng.choice(flat.size, size=k, replace=False):
            orig = flat[idx]
            flat[idx] = orig + h
            up = {c: float(v.data) for c, v in all_components().items()}
            flat[idx] = orig - h
            dn = {c: float(v.data) for c, v in all_components().items()}
            flat[idx] = orig
            for comp in components:
                fd = (up[comp] - dn[comp]) / (2 * h)
                an = float(analytic[comp][name].reshape(-1)[idx])
                scale = max(abs(fd), abs(an), 1e-6)
                rel = abs(fd - an) / scale
                if rel > worst:
                    worst, worst_where = rel, f"{comp}:{name}[{idx}]"
    dt = time.time() - t0
    return CheckResult("gradient_oracle", worst < rel_tol, worst,
                       f"max rel err {worst:.2e} at {worst_where}, tol {rel_tol:g}", dt)


def check_partition_invariance(tol: float = 1e-10, seed: int = 7) -> CheckResult:
    """total_loss and all parameter gradients identical for R in {1, 2, 4}."""
    t0 = time.time()
    cfg = ModelConfig(layers=2, d_model=16, n_heads=2, image_size=32, patch=8,
                      bins=32, head_hidden=16, dtype="float64")
    vocab = Vocab()
    params = init_params(cfg)
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(4):
        pair = tiny_fixture_samples(cfg, vocab, n_instances=1 + int(rng.integers(1, 3)),
                                    seed=seed + 10 * i)
        samples.append(pair[0])
    teacher = FrozenTeacher(params, cfg)
    for seq in samples:
        base = teacher.features(seq.image, key=seq.sample_id or str(id(seq)))

    results = {}
    for r in (1, 2, 4):
        comps, grads = partitioned_loss_and_grads(params, samples, cfg, "full_ar",
                                                  LossWeights(), r, teacher)
        results[r] = (comps, grads)

    worst = 0.0
    where = ""
    base_comps, base_grads = results[1]
    for r in (2, 4):
        comps, grads = results[r]
        d = abs(comps["total"] - base_comps["total"])
        if d > worst:
            worst, where = d, f"total@R={r}"
        for k in base_grads:
            gd = float(np.max(np.abs(grads[k] - base_grads[k])))
            if gd > worst:
                worst, where = gd, f"grad:{k}@R={r}"
    dt = time.time() - t0
    return CheckResult("partition_invariance", worst < tol, worst,
                       f"max deviation {worst:.2e} at {where}, tol {tol:g}", dt)


def check_packing_equivalence(n_trials: int = 100, tol: float = 1e-5,
                              seed: int = 11) -> CheckResult:
    """Packed forward equals per-sample forwards within tol (float32)."""
    t0 = time.time()
    cfg = ModelConfig(layers=2, d_model=32, n_heads=2, image_size=32, patch=8,
                      bins=32, head_hidden=16, dtype="float32")
    vocab = Vocab()
    params = init_params(cfg)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for trial in range(n_trials):
        k = int(rng.integers(2, 5))
        group = []
        for i in range(k):
            pair = tiny_fixture_samples(cfg, vocab, n_instances=1 + int(rng.integers(0, 3)),
                                        seed=int(rng.integers(0, 10 ** 6)))
            group.append(pair[trial % 2])
        mode = ("full_ar", "query_masked")[trial % 2]
        packed = pack(group, 4096)[0]
        out = forward(params, packed, cfg, mode=mode, with_masks=False)
        row = 0
        for seq in group:
            single = pack([seq], 4096)[0]
            ref = forward(params, single, cfg, mode=mode, with_masks=False)
            diff = np.max(np.abs(out.lm_logits.data[row:row + len(seq)] - ref.lm_logits.data))
            worst = max(worst, float(diff))
            row += len(seq)
    dt = time.time() - t0
    return CheckResult("packing_equivalence", worst < tol, worst,
                       f"{n_trials} packings, max |delta lm logits| {worst:.2e}, tol {tol:g}", dt)


def check_matcher(n_matrices: int = 500, max_small: int = 6, seed: int = 13) -> CheckResult:
    """Production Hungarian matcher vs exhaustive permutation search."""
    from .evalkit import hungarian_match
    t0 = time.time()
    rng = np.random.default_rng(seed)
    failures = 0
    detail = ""
    for _ in range(n_matrices):
        n = int(rng.integers(1, 9))
        m = int(rng.integers(1, max_small + 1))
        if min(n, m) > max_small:
            n = max_small
        if rng.random() < 0.5:
            n, m = m, n
        mat = rng.random((n, m))
        got = sorted(hungarian_match(mat))
        want = brute_force_assignment(mat)
        if got != want:
            failures += 1
            if not detail:
                detail = f"first mismatch: {got} vs {want} on {n}x{m}"
    dt = time.time() - t0
    return CheckResult("matching_oracle", failures == 0, failures,
                       detail or f"{n_matrices} random matrices, all equal to brute force", dt)


def run_all(fast: bool = False) -> list[CheckResult]:
    results = [
        check_gradients(probes_per_tensor=2 if fast else 4),
        check_partition_invariance(),
        check_packing_equivalence(n_trials=20 if fast else 100),
        check_matcher(n_matrices=100 if fast else 500),
    ]
    return results
