"""The toy unified dense transformer.

One stack processes image patches and task tokens with a hybrid attention
mask; coordinates and sizes decoded by dedicated bin heads are re-injected
into the input stream as Fourier features; masks come from a dot product
between projected seg-token states and cross-attention-upsampled visual
features.

Two execution paths share the same parameters and math:

* `forward` builds an autodiff graph over a PackedBatch (teacher forcing),
  used by training, gradient checks and the packing-equivalence test;
* `decode` is a plain-numpy incremental generator with a per-prompt KV
  cache, used for inference (each prompt decodes as an independent query
  block over a shared image prefix, matching the query-masked stages).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .geometry import dequantize_unit, dequantize_size_array, mask_to_box
from .posenc import (FourierConfig, RopeConfig, fourier_features,
                     ggrope_directions, ggrope_frequencies)
from .seqformat import (ROLE_COORD, ROLE_IMAGE, ROLE_SEG, ROLE_SIZE,
                        PackedBatch, TokenSequence, Vocab, attention_mask)

__all__ = [
    "ModelConfig",
    "ModelOutputs",
    "DecodedInstance",
    "DecodeResult",
    "init_params",
    "forward",
    "upsample_features",
    "predict_mask",
    "decode",
    "save_checkpoint",
    "load_checkpoint",
    "patchify",
    "resize_image",
]

UPSAMPLE_FACTORS = (1, 2, 4, 8, 16)
_NEG = -1e30


@dataclass(frozen=True)
class ModelConfig:
    """Toy-scale defaults: 4 layers, width 64, 8px patches on 64px images."""

    layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    vocab_size: int = Vocab().size
    bins: int = 1024
    patch: int = 8
    image_size: int = 64
    mlp_ratio: int = 4
    head_hidden: int = 192
    rope_base: float = 10000.0
    rope_omega_max: float = 4.0
    rope_omega_min: float = 0.25
    fourier_sigma: float = 10.0
    fourier_seed: int = 1234
    param_seed: int = 0
    upsample_factor: int = 4
    upsampler_locality: float = 1.0
    upsampler_dim: int = 128
    dtype: str = "float32"

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.head_dim % 4 != 0:
            raise ValueError("head_dim must be divisible by 4 (two rotary halves of pairs)")
        if self.image_size % self.patch != 0:
            raise ValueError("image_size must be divisible by patch")
        if self.upsample_factor not in UPSAMPLE_FACTORS:
            raise ValueError(f"upsample_factor must be one of {UPSAMPLE_FACTORS}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def rope(self) -> RopeConfig:
        return RopeConfig(self.head_dim, self.rope_base,
                          self.rope_omega_max, self.rope_omega_min)

    def fourier(self) -> FourierConfig:
        return FourierConfig(self.d_model, self.fourier_sigma, self.fourier_seed)

    def fourier_coarse(self) -> FourierConfig:
        """Region-bandwidth channels for pixel/patch featurization.

        sigma = 10 gives ~1px kernels (great for boundaries and for the
        coordinate encoder, where the paper sets it), but a mask query must
        gate object-sized regions; sigma = 1 puts the kernel at ~10px.
        """
        return FourierConfig(self.d_model, 1.0, self.fourier_seed + 1)


def init_params(cfg: ModelConfig) -> dict[str, ad.Var]:
    """GPT-2-style init; residual output projections are depth-scaled."""
    rng = np.random.default_rng(cfg.param_seed)
    d, V, B = cfg.d_model, cfg.vocab_size, cfg.bins
    hh = cfg.head_hidden
    std = 0.02
    res_std = std / np.sqrt(2.0 * cfg.layers)
    dt = cfg.np_dtype

    def normal(shape, s=std):
        return rng.normal(0.0, s, size=shape).astype(dt)

    def zeros(shape):
        return np.zeros(shape, dtype=dt)

    p: dict[str, np.ndarray] = {
        "tok_emb": normal((V, d)),
        "patch_w": normal((cfg.patch * cfg.patch * 3 + 2 * d, d)),
        "patch_b": zeros(d),
        "fcoord_w": normal((2 * d, d)),
        "fcoord_b": zeros(d),
        "fsize_w": normal((2 * d, d)),
        "fsize_b": zeros(d),
        "fseg_w": normal((4 * d, d)),
        "fseg_b": zeros(d),
        "lnf_g": np.ones(d, dtype=dt),
        "lnf_b": zeros(d),
        "lm_w": normal((d, V)),
        "lm_b": zeros(V),
        "coord_w1": normal((d, hh)),
        "coord_b1": zeros(hh),
        "coord_w2": normal((hh, 2 * B)),
        "coord_b2": zeros(2 * B),
        "size_w1": normal((d, hh)),
        "size_b1": zeros(hh),
        "size_w2": normal((hh, 2 * B)),
        "size_b2": zeros(2 * B),
        "segproj_w": normal((d, cfg.upsampler_dim)),
        "segproj_b": zeros(cfg.upsampler_dim),
        "pix_w1": normal((27 + 2 * d, cfg.upsampler_dim)),
        "pix_b1": zeros(cfg.upsampler_dim),
        "pix_w2": normal((cfg.upsampler_dim, cfg.upsampler_dim)),
        "pix_b2": zeros(cfg.upsampler_dim),
        "up_wq": normal((cfg.upsampler_dim, cfg.upsampler_dim)),
        "up_bq": zeros(cfg.upsampler_dim),
        "up_wk": normal((d, cfg.upsampler_dim)),
        "up_bk": zeros(cfg.upsampler_dim),
        "up_wv": normal((d, cfg.upsampler_dim)),
        "up_bv": zeros(cfg.upsampler_dim),
        "up_wo": normal((cfg.upsampler_dim, cfg.upsampler_dim), res_std),
        "up_bo": zeros(cfg.upsampler_dim),
        "up_wr": normal((cfg.upsampler_dim, cfg.upsampler_dim), res_std),
    }
    for i in range(cfg.layers):
        p[f"l{i}.ln1_g"] = np.ones(d, dtype=dt)
        p[f"l{i}.ln1_b"] = zeros(d)
        p[f"l{i}.wq"] = normal((d, d))
        p[f"l{i}.bq"] = zeros(d)
        p[f"l{i}.wk"] = normal((d, d))
        p[f"l{i}.bk"] = zeros(d)
        p[f"l{i}.wv"] = normal((d, d))
        p[f"l{i}.bv"] = zeros(d)
        p[f"l{i}.wo"] = normal((d, d), res_std)
        p[f"l{i}.bo"] = zeros(d)
        p[f"l{i}.ln2_g"] = np.ones(d, dtype=dt)
        p[f"l{i}.ln2_b"] = zeros(d)
        p[f"l{i}.w1"] = normal((d, cfg.mlp_ratio * d))
        p[f"l{i}.b1"] = zeros(cfg.mlp_ratio * d)
        p[f"l{i}.w2"] = normal((cfg.mlp_ratio * d, d), res_std)
        p[f"l{i}.b2"] = zeros(d)
    return {k: ad.Var(v, requires_grad=True) for k, v in p.items()}


# ---------------------------------------------------------------------------
# shared numeric helpers


def resize_image(img: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an HxWxC float image via separable matrices."""
    h, w = img.shape[:2]
    rh = _resize_matrix(h, out_hw[0])
    rw = _resize_matrix(w, out_hw[1])
    return np.einsum("ih,hwc,jw->ijc", rh, img, rw, optimize=True)


@lru_cache(maxsize=64)
def _resize_matrix(src: int, dst: int) -> np.ndarray:
    """Row-interpolation matrix [dst, src], half-pixel-centers convention."""
    if src == dst:
        return np.eye(src)
    out = np.zeros((dst, src))
    coords = (np.arange(dst) + 0.5) * src / dst - 0.5
    coords = np.clip(coords, 0.0, src - 1.0)
    lo = np.floor(coords).astype(int)
    hi = np.minimum(lo + 1, src - 1)
    frac = coords - lo
    out[np.arange(dst), lo] += 1.0 - frac
    out[np.arange(dst), hi] += frac
    return out


def patchify(img: np.ndarray, patch: int) -> np.ndarray:
    """uint8/float HxWx3 -> [grid_h*grid_w, patch*patch*3] in [0,1], raster order."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.max() > 1.5:
        arr = arr / 255.0
    h, w = arr.shape[:2]
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    tiles = arr.reshape(gh, patch, gw, patch, 3).transpose(0, 2, 1, 3, 4)
    return tiles.reshape(gh * gw, patch * patch * 3)


def patch_inputs(img: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Patch pixels plus fixed Fourier channels of the patch center.

    Rotary alone gives attention only *relative* positions, and attention
    output lives in the span of value vectors, which are translation
    equivariant functions of pixels; at paper scale absolute position comes
    in through distillation-initialized features, which random init (the
    desk-scale substitute) lacks. The fixed positional channels restore an
    absolute readout so the coordinate head can ground.
    """
    pixels = patchify(img, cfg.patch)
    gh, gw = img.shape[0] // cfg.patch, img.shape[1] // cfg.patch
    yy, xx = np.mgrid[0:gh, 0:gw]
    pos = np.stack([(xx.ravel() + 0.5) / gw, (yy.ravel() + 0.5) / gh], axis=1)
    fine = fourier_features(pos, cfg.fourier())
    coarse = fourier_features(pos, cfg.fourier_coarse())
    return np.concatenate([pixels, fine, coarse], axis=1)


def _rope_tables(cfg: ModelConfig, positions, grid, roles, dtype):
    """Per-position cos/sin for the 1D and 2D rotary halves.

    Non-image positions get the identity (angle 0) on the 2D half.
    """
    rc = cfg.rope()
    t = np.asarray(positions, dtype=np.float64)
    ang1 = t[:, None] * rc.freqs_1d()[None, :]
    p = np.asarray(grid, dtype=np.float64)
    ang2 = (p @ rc.directions_2d().T) * rc.freqs_2d()[None, :]
    ang2[np.asarray(roles) != ROLE_IMAGE] = 0.0
    return (np.cos(ang1).astype(dtype), np.sin(ang1).astype(dtype),
            np.cos(ang2).astype(dtype), np.sin(ang2).astype(dtype))


@lru_cache(maxsize=8)
def _upsampler_rope(d_model: int, omega_max: float, omega_min: float):
    """Direction/frequency tables for the cross-attention upsampler (d/2 pairs)."""
    n = d_model // 2
    return ggrope_directions(n), ggrope_frequencies(n, omega_max, omega_min)


def _upsampler_angles(cfg: ModelConfig, pos: np.ndarray) -> np.ndarray:
    dirs, freqs = _upsampler_rope(cfg.upsampler_dim, cfg.rope_omega_max, cfg.rope_omega_min)
    return (np.asarray(pos, dtype=np.float64) @ dirs.T) * freqs[None, :]


def _rotate(x, cos, sin):
    """Tape-friendly pair rotation of the last axis (constant angles)."""
    n = cos.shape[-1]
    a, b = x[..., :n], x[..., n:]
    return ad.concat([a * cos - b * sin, a * sin + b * cos], axis=-1)


def _linear(x, w, b):
    return ad.matmul(x, w) + b


# ---------------------------------------------------------------------------
# forward pass (autodiff graph)


@dataclass
class ModelOutputs:
    """Per-role head outputs of one packed forward."""

    hidden: ad.Var                       # [S, d] final normed stream
    lm_logits: ad.Var                    # [S, V]
    coord_logits: ad.Var | None          # [Nc, 2, bins]
    size_logits: ad.Var | None           # [Ns, 2, bins]
    seg_queries: ad.Var | None           # [Nseg, d] projected
    coord_slots: np.ndarray = field(default_factory=lambda: np.empty(0, int))
    size_slots: np.ndarray = field(default_factory=lambda: np.empty(0, int))
    seg_slots: np.ndarray = field(default_factory=lambda: np.empty(0, int))
    vout: list = field(default_factory=list)          # per sample [N_img, d]
    mask_logits: list = field(default_factory=list)   # per sample [n_seg, H, W] or None


def value_features(vals: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Two-bandwidth Fourier featurization of points in [0,1]^2."""
    return np.concatenate([fourier_features(vals, cfg.fourier()),
                           fourier_features(vals, cfg.fourier_coarse())], axis=-1)


def embed(params: dict, batch: PackedBatch, cfg: ModelConfig) -> ad.Var:
    """Token-table embedding with patch projection and Fourier re-injection."""
    dt = cfg.np_dtype
    base = ad.take_rows(params["tok_emb"], batch.tokens)

    img_idx = np.nonzero(batch.roles == ROLE_IMAGE)[0]
    if img_idx.size:
        patches = np.concatenate([
            patch_inputs(seq.image, cfg) for seq in batch.sequences
        ]).astype(dt)
        base = ad.put_rows(base, img_idx, _linear(patches, params["patch_w"], params["patch_b"]))

    coord_idx = np.nonzero(batch.roles == ROLE_COORD)[0]
    if coord_idx.size:
        vals = batch.inject_centers[coord_idx]
        if np.isnan(vals).any():
            raise ValueError("missing continuous center target during teacher forcing")
        gamma = value_features(vals, cfg).astype(dt)
        base = ad.put_rows(base, coord_idx, _linear(gamma, params["fcoord_w"], params["fcoord_b"]))
    size_idx = np.nonzero(batch.roles == ROLE_SIZE)[0]
    if size_idx.size:
        vals = batch.inject_sizes[size_idx]
        if np.isnan(vals).any():
            raise ValueError("missing continuous size target during teacher forcing")
        gamma = value_features(vals, cfg).astype(dt)
        base = ad.put_rows(base, size_idx, _linear(gamma, params["fsize_w"], params["fsize_b"]))
    seg_idx = np.nonzero(batch.roles == ROLE_SEG)[0]
    if seg_idx.size:
        c, s = batch.inject_centers[seg_idx], batch.inject_sizes[seg_idx]
        if np.isnan(c).any() or np.isnan(s).any():
            raise ValueError("missing resolved geometry at seg slot during teacher forcing")
        gamma = np.concatenate([value_features(c, cfg), value_features(s, cfg)], axis=1).astype(dt)
        # additive on top of the token embedding: the seg query keeps its
        # role identity but is conditioned on the resolved location/extent
        seg_emb = ad.take_rows(params["tok_emb"], batch.tokens[seg_idx]) \
            + _linear(gamma, params["fseg_w"], params["fseg_b"])
        base = ad.put_rows(base, seg_idx, seg_emb)
    return base


def _backbone(params: dict, x: ad.Var, batch: PackedBatch, cfg: ModelConfig, mode: str) -> ad.Var:
    dt = cfg.np_dtype
    S = len(batch)
    H, hd = cfg.n_heads, cfg.head_dim
    cos1, sin1, cos2, sin2 = _rope_tables(cfg, batch.positions, batch.grid, batch.roles, dt)
    allowed = attention_mask(batch.attention_spec(mode))
    bias = np.where(allowed, 0.0, _NEG).astype(dt)[None]  # [1, S, S]
    scale = 1.0 / np.sqrt(hd)

    def heads_split(v):
        return ad.transpose(ad.reshape(v, (S, H, hd)), (1, 0, 2))

    def rope(v):
        half = hd // 2
        one = _rotate(v[..., :half], cos1, sin1)
        two = _rotate(v[..., half:], cos2, sin2)
        return ad.concat([one, two], axis=-1)

    for i in range(cfg.layers):
        h = ad.layernorm(x, params[f"l{i}.ln1_g"], params[f"l{i}.ln1_b"])
        q = rope(heads_split(_linear(h, params[f"l{i}.wq"], params[f"l{i}.bq"])))
        k = rope(heads_split(_linear(h, params[f"l{i}.wk"], params[f"l{i}.bk"])))
        v = heads_split(_linear(h, params[f"l{i}.wv"], params[f"l{i}.bv"]))
        scores = ad.matmul(q, ad.transpose(k, (0, 2, 1))) * scale + bias
        ctx = ad.matmul(ad.softmax(scores, axis=-1), v)
        merged = ad.reshape(ad.transpose(ctx, (1, 0, 2)), (S, cfg.d_model))
        x = x + _linear(merged, params[f"l{i}.wo"], params[f"l{i}.bo"])
        h2 = ad.layernorm(x, params[f"l{i}.ln2_g"], params[f"l{i}.ln2_b"])
        m = _linear(ad.gelu(_linear(h2, params[f"l{i}.w1"], params[f"l{i}.b1"])),
                    params[f"l{i}.w2"], params[f"l{i}.b2"])
        x = x + m
        if np.isnan(x.data).any():
            raise FloatingPointError(f"NaN activations after layer {i}")
    return ad.layernorm(x, params["lnf_g"], params["lnf_b"])


def upsample_features(params: dict, vout, image: np.ndarray, factor: int,
                      cfg: ModelConfig):
    """Cross-attention upsampler: pixel queries against patch key/values.

    Queries encode (RGB, Fourier of normalized position) of the image
    resized to the factor-f grid; the same golden-angle rotary scheme ties
    pixel and patch coordinates together. Returns (V*, (grid_h, grid_w)).
    """
    if factor not in UPSAMPLE_FACTORS:
        raise ValueError(f"upsample factor {factor} not in {UPSAMPLE_FACTORS}")
    dt = cfg.np_dtype
    arr = np.asarray(image, dtype=np.float64)
    if arr.max() > 1.5:
        arr = arr / 255.0
    gh, gw = arr.shape[0] // cfg.patch, arr.shape[1] // cfg.patch
    oh, ow = gh * factor, gw * factor

    resized = resize_image(arr, (oh, ow))
    # 3x3 RGB window per pixel: local contrast guides the boundaries
    padded = np.pad(resized, ((1, 1), (1, 1), (0, 0)), mode="edge")
    windows = np.stack([padded[dy:dy + oh, dx:dx + ow]
                        for dy in range(3) for dx in range(3)], axis=2)
    win_flat = windows.reshape(oh * ow, 27)
    yy, xx = np.mgrid[0:oh, 0:ow]
    pos_norm = np.stack([(xx.ravel() + 0.5) / ow, (yy.ravel() + 0.5) / oh], axis=1)
    gamma = np.concatenate([fourier_features(pos_norm, cfg.fourier()),
                            fourier_features(pos_norm, cfg.fourier_coarse())], axis=1)
    pix_in = np.concatenate([win_flat, gamma], axis=1).astype(dt)

    enc = _linear(ad.gelu(_linear(pix_in, params["pix_w1"], params["pix_b1"])),
                  params["pix_w2"], params["pix_b2"])

    # positions in patch units: pixel centers vs integer patch centers
    q_pos = np.stack([(xx.ravel() + 0.5) / factor - 0.5,
                      (yy.ravel() + 0.5) / factor - 0.5], axis=1)
    pyy, pxx = np.mgrid[0:gh, 0:gw]
    k_pos = np.stack([pxx.ravel(), pyy.ravel()], axis=1).astype(np.float64)
    aq = _upsampler_angles(cfg, q_pos)
    ak = _upsampler_angles(cfg, k_pos)

    q = _rotate(_linear(enc, params["up_wq"], params["up_bq"]),
                np.cos(aq).astype(dt), np.sin(aq).astype(dt))
    k = _rotate(_linear(vout, params["up_wk"], params["up_bk"]),
                np.cos(ak).astype(dt), np.sin(ak).astype(dt))
    v = _linear(vout, params["up_wv"], params["up_bv"])
    scores = ad.matmul(q, ad.transpose(k, (1, 0))) * (1.0 / np.sqrt(cfg.upsampler_dim))
    if cfg.upsampler_locality > 0:
        # fixed windowed-locality prior: pixels start by reading their own
        # patch neighborhood (the reference upsampler attends in windows)
        dist2 = ((q_pos[:, None, :] - k_pos[None, :, :]) ** 2).sum(-1)
        scores = scores + (-0.5 * dist2 / cfg.upsampler_locality ** 2).astype(dt)
    attn = ad.softmax(scores, axis=-1)
    # residual pixel path: keeps absolute-position channels in V*, without
    # which two identical far-apart objects would get identical features
    vstar = _linear(ad.matmul(attn, v), params["up_wo"], params["up_bo"]) \
        + ad.matmul(enc, params["up_wr"])
    return vstar, (oh, ow)


def predict_mask(seg_queries, vstar, grid_hw: tuple[int, int], out_hw: tuple[int, int],
                 dtype=np.float64):
    """Mask logits = V* . query, reshaped to the grid, upsampled to out_hw.

    seg_queries: [n, d] (already projected); vstar: [grid_h*grid_w, d].
    Returns [n, out_h, out_w] logits (sigmoid applied downstream).
    """
    gh, gw = grid_hw
    flat = ad.matmul(seg_queries, ad.transpose(vstar, (1, 0)))  # [n, gh*gw]
    grid3 = ad.reshape(flat, (-1, gh, gw))
    uh = _resize_matrix(gh, out_hw[0]).astype(dtype)
    uw = _resize_matrix(gw, out_hw[1]).astype(dtype)
    return ad.matmul(ad.matmul(ad.Var(uh), grid3), uw.T.astype(dtype))


def forward(params: dict, batch: PackedBatch, cfg: ModelConfig, mode: str = "full_ar",
            upsample_factor: int | None = None, with_masks: bool = True) -> ModelOutputs:
    """Teacher-forced forward over a packed batch; heads at role positions.

    A coord/size value for instance k is predicted from the hidden state one
    position before its slot (the slot input already carries the forced
    value), so head logits gather hidden[slot - 1].
    """
    hfin = _backbone(params, embed(params, batch, cfg), batch, cfg, mode)
    lm_logits = _linear(hfin, params["lm_w"], params["lm_b"])

    def bin_head(prefix, slots):
        picked = ad.take_rows(hfin, slots - 1)
        hidden = ad.gelu(_linear(picked, params[f"{prefix}_w1"], params[f"{prefix}_b1"]))
        return ad.reshape(_linear(hidden, params[f"{prefix}_w2"], params[f"{prefix}_b2"]),
                          (len(slots), 2, cfg.bins))

    coord_slots = np.nonzero(batch.roles == ROLE_COORD)[0]
    size_slots = np.nonzero(batch.roles == ROLE_SIZE)[0]
    seg_slots = np.nonzero(batch.roles == ROLE_SEG)[0]

    coord_logits = bin_head("coord", coord_slots) if coord_slots.size else None
    size_logits = bin_head("size", size_slots) if size_slots.size else None
    seg_queries = None
    if seg_slots.size:
        seg_queries = _linear(ad.take_rows(hfin, seg_slots), params["segproj_w"], params["segproj_b"])

    img_rows = np.nonzero(batch.roles == ROLE_IMAGE)[0]
    vout_all = ad.take_rows(hfin, img_rows)
    vout, mask_logits = [], []
    row = 0
    seg_row = 0
    factor = upsample_factor or cfg.upsample_factor
    for k, seq in enumerate(batch.sequences):
        n_img = seq.n_image
        vk = vout_all[row:row + n_img]
        row += n_img
        vout.append(vk)
        n_seg = int(np.count_nonzero(seq.roles == ROLE_SEG))
        if with_masks and n_seg:
            vstar, grid_hw = upsample_features(params, vk, seq.image, factor, cfg)
            qk = seg_queries[seg_row:seg_row + n_seg]
            out_hw = seq.image.shape[:2]
            mask_logits.append(predict_mask(qk, vstar, grid_hw, out_hw, dtype=cfg.np_dtype))
        else:
            mask_logits.append(None)
        seg_row += n_seg

    return ModelOutputs(hidden=hfin, lm_logits=lm_logits, coord_logits=coord_logits,
                        size_logits=size_logits, seg_queries=seg_queries,
                        coord_slots=coord_slots, size_slots=size_slots, seg_slots=seg_slots,
                        vout=vout, mask_logits=mask_logits)


# ---------------------------------------------------------------------------
# inference (plain numpy, incremental KV cache)


@dataclass
class DecodedInstance:
    center: tuple[float, float]
    size: tuple[float, float]
    mask: np.ndarray | None = None


@dataclass
class DecodeResult:
    prompt: str
    present: bool
    instances: list[DecodedInstance]
    truncated: bool = False


class _Cache:
    """Per-layer K/V buffers over image prefix + one query block."""

    def __init__(self, layers: int, n_heads: int, head_dim: int, capacity: int, dtype):
        self.k = np.zeros((layers, n_heads, capacity, head_dim), dtype=dtype)
        self.v = np.zeros((layers, n_heads, capacity, head_dim), dtype=dtype)
        self.n = 0

    def clone_prefix(self, n_prefix: int) -> "_Cache":
        out = _Cache(self.k.shape[0], self.k.shape[1], self.k.shape[3], self.k.shape[2], self.k.dtype)
        out.k[:, :, :n_prefix] = self.k[:, :, :n_prefix]
        out.v[:, :, :n_prefix] = self.v[:, :, :n_prefix]
        out.n = n_prefix
        return out


class _Decoder:
    """Numpy-only reimplementation of the forward math for generation."""

    def __init__(self, params: dict, cfg: ModelConfig, vocab: Vocab):
        self.p = {k: (v.data if isinstance(v, ad.Var) else np.asarray(v)) for k, v in params.items()}
        self.cfg = cfg
        self.vocab = vocab
        self.rc = cfg.rope()
        self._f1 = self.rc.freqs_1d()
        self._d2 = self.rc.directions_2d()
        self._f2 = self.rc.freqs_2d()

    def _ln(self, x, g, b):
        mu = x.mean(-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + 1e-5)
        return xc * inv * g + b

    @staticmethod
    def _gelu(x):
        c = np.sqrt(2.0 / np.pi)
        return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x ** 3)))

    def _rot(self, x, ang1, ang2):
        """x: [..., head_dim]; rotate both halves."""
        hd = self.cfg.head_dim
        q1, q2 = x[..., :hd // 2], x[..., hd // 2:]

        def rot(v, ang):
            n = ang.shape[-1]
            a, b = v[..., :n], v[..., n:]
            return np.concatenate([a * np.cos(ang) - b * np.sin(ang),
                                   a * np.sin(ang) + b * np.cos(ang)], axis=-1)

        return np.concatenate([rot(q1, ang1), rot(q2, ang2)], axis=-1)

    def prefill_image(self, image: np.ndarray, capacity: int) -> tuple[_Cache, np.ndarray, tuple[int, int]]:
        """Run the bidirectional image prefix once; returns cache and V_out."""
        cfg, p = self.cfg, self.p
        patches = patch_inputs(image, cfg).astype(p["patch_w"].dtype)
        gh, gw = image.shape[0] // cfg.patch, image.shape[1] // cfg.patch
        n = gh * gw
        x = patches @ p["patch_w"] + p["patch_b"]
        t = np.arange(n, dtype=np.float64)
        ang1 = t[:, None] * self._f1[None, :]
        yy, xx = np.mgrid[0:gh, 0:gw]
        grid = np.stack([xx.ravel(), yy.ravel()], axis=1).astype(np.float64)
        ang2 = (grid @ self._d2.T) * self._f2[None, :]
        cache = _Cache(cfg.layers, cfg.n_heads, cfg.head_dim, capacity, x.dtype)
        H, hd = cfg.n_heads, cfg.head_dim
        for i in range(cfg.layers):
            h = self._ln(x, p[f"l{i}.ln1_g"], p[f"l{i}.ln1_b"])
            q = (h @ p[f"l{i}.wq"] + p[f"l{i}.bq"]).reshape(n, H, hd).transpose(1, 0, 2)
            k = (h @ p[f"l{i}.wk"] + p[f"l{i}.bk"]).reshape(n, H, hd).transpose(1, 0, 2)
            v = (h @ p[f"l{i}.wv"] + p[f"l{i}.bv"]).reshape(n, H, hd).transpose(1, 0, 2)
            q = self._rot(q, ang1, ang2)
            k = self._rot(k, ang1, ang2)
            cache.k[i, :, :n] = k
            cache.v[i, :, :n] = v
            att = np.einsum("hqd,hkd->hqk", q, k) / np.sqrt(hd)
            att = np.exp(att - att.max(-1, keepdims=True))
            att /= att.sum(-1, keepdims=True)
            ctx = np.einsum("hqk,hkd->hqd", att, v).transpose(1, 0, 2).reshape(n, cfg.d_model)
            x = x + ctx @ p[f"l{i}.wo"] + p[f"l{i}.bo"]
            h2 = self._ln(x, p[f"l{i}.ln2_g"], p[f"l{i}.ln2_b"])
            x = x + self._gelu(h2 @ p[f"l{i}.w1"] + p[f"l{i}.b1"]) @ p[f"l{i}.w2"] + p[f"l{i}.b2"]
        cache.n = n
        vout = self._ln(x, p["lnf_g"], p["lnf_b"])
        return cache, vout, (gh, gw)

    def step(self, cache: _Cache, emb: np.ndarray, t: int) -> np.ndarray:
        """Feed one task token (embedding `emb`) at local position t."""
        cfg, p = self.cfg, self.p
        H, hd = cfg.n_heads, cfg.head_dim
        ang1 = np.float64(t) * self._f1[None, :]
        ang2 = np.zeros((1, self.rc.n_pairs_2d))
        x = emb
        for i in range(cfg.layers):
            h = self._ln(x, p[f"l{i}.ln1_g"], p[f"l{i}.ln1_b"])
            q = (h @ p[f"l{i}.wq"] + p[f"l{i}.bq"]).reshape(H, hd)
            k = (h @ p[f"l{i}.wk"] + p[f"l{i}.bk"]).reshape(H, hd)
            v = (h @ p[f"l{i}.wv"] + p[f"l{i}.bv"]).reshape(H, hd)
            q = self._rot(q, ang1, ang2)
            k = self._rot(k, ang1, ang2)
            cache.k[i, :, cache.n] = k
            cache.v[i, :, cache.n] = v
            keys = cache.k[i, :, :cache.n + 1]
            vals = cache.v[i, :, :cache.n + 1]
            att = np.einsum("hd,hkd->hk", q, keys) / np.sqrt(hd)
            att = np.exp(att - att.max(-1, keepdims=True))
            att /= att.sum(-1, keepdims=True)
            ctx = np.einsum("hk,hkd->hd", att, vals).reshape(cfg.d_model)
            x = x + ctx @ p[f"l{i}.wo"] + p[f"l{i}.bo"]
            h2 = self._ln(x, p[f"l{i}.ln2_g"], p[f"l{i}.ln2_b"])
            x = x + self._gelu(h2 @ p[f"l{i}.w1"] + p[f"l{i}.b1"]) @ p[f"l{i}.w2"] + p[f"l{i}.b2"]
        cache.n += 1
        return self._ln(x, p["lnf_g"], p["lnf_b"])

    def lm_logits(self, h):
        return h @ self.p["lm_w"] + self.p["lm_b"]

    def bin_logits(self, prefix, h):
        hid = self._gelu(h @ self.p[f"{prefix}_w1"] + self.p[f"{prefix}_b1"])
        return (hid @ self.p[f"{prefix}_w2"] + self.p[f"{prefix}_b2"]).reshape(2, self.cfg.bins)

    def coord_emb(self, c):
        g = value_features(np.atleast_2d(np.asarray(c)), self.cfg)[0]
        return g.astype(self.p["fcoord_w"].dtype) @ self.p["fcoord_w"] + self.p["fcoord_b"]

    def size_emb(self, s):
        g = value_features(np.atleast_2d(np.asarray(s)), self.cfg)[0]
        return g.astype(self.p["fsize_w"].dtype) @ self.p["fsize_w"] + self.p["fsize_b"]

    def seg_emb(self, c, s):
        g = np.concatenate([value_features(np.atleast_2d(np.asarray(c)), self.cfg)[0],
                            value_features(np.atleast_2d(np.asarray(s)), self.cfg)[0]])
        return self.p["tok_emb"][self.vocab.seg] \
            + g.astype(self.p["fseg_w"].dtype) @ self.p["fseg_w"] + self.p["fseg_b"]


def _pick(logits: np.ndarray, temperature: float, rng, allowed=None) -> int:
    """Greedy for temperature <= 0, else categorical sample; optionally
    restricted (and renormalized) to an allowed id set."""
    z = logits.astype(np.float64).copy()
    if allowed is not None:
        keep = np.full(z.shape, -np.inf)
        keep[list(allowed)] = z[list(allowed)]
        z = keep
    if temperature <= 0.0:
        return int(np.argmax(z))
    z = z / temperature
    z -= z.max()
    prob = np.exp(z)
    prob /= prob.sum()
    return int(rng.choice(len(prob), p=prob))


def decode(params: dict, cfg: ModelConfig, image: np.ndarray, prompts: list[str],
           vocab: Vocab | None = None, mode: str = "greedy",
           temperatures: tuple[float, float, float] = (0.7, 0.7, 0.7),
           max_instances: int = 600, boxes_only: bool = False,
           upsample_factor: int | None = None, seed: int = 0,
           drop_empty_masks: bool = True) -> list[DecodeResult]:
    """Autoregressive inference: each prompt decodes as an independent query
    block over the shared image prefix.

    mode "greedy" is deterministic; "sample" draws from the language, center
    and size heads with independent temperatures. Instance emission follows
    the fixed coord -> size -> seg order with decoded values re-injected as
    Fourier features; box-only mode skips the upsampler entirely. When
    masks are computed, instances whose mask comes out empty predict no
    pixels and are dropped by default (presence is "any mask predicted").
    """
    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown decode mode {mode!r}")
    if not prompts or any(not p for p in prompts):
        raise ValueError("prompts must be nonempty")
    vocab = vocab or Vocab()
    dec = _Decoder(params, cfg, vocab)
    rng = np.random.default_rng(seed)
    t_lang, t_coord, t_size = temperatures if mode == "sample" else (0.0, 0.0, 0.0)

    longest = max(len(p) for p in prompts)
    capacity = (image.shape[0] // cfg.patch) * (image.shape[1] // cfg.patch) \
        + longest + 3 * max_instances + 8
    prefix, vout, grid_hw = dec.prefill_image(image, capacity)
    n_img = prefix.n

    results = []
    pending_queries: list[list[np.ndarray]] = []  # raw seg hidden per prompt
    for prompt in prompts:
        cache = prefix.clone_prefix(n_img)
        t = n_img
        h = None
        for tid in vocab.encode_text(prompt):
            h = dec.step(cache, dec.p["tok_emb"][tid], t)
            t += 1
        presence = _pick(dec.lm_logits(h), t_lang, rng, allowed=(vocab.present, vocab.absent))
        instances: list[DecodedInstance] = []
        seg_hiddens: list[np.ndarray] = []
        truncated = False
        if presence == vocab.present:
            while True:
                cb = dec.bin_logits("coord", h)
                bx = _pick(cb[0], t_coord, rng)
                by = _pick(cb[1], t_coord, rng)
                c = (float(dequantize_unit(bx, cfg.bins)), float(dequantize_unit(by, cfg.bins)))
                h = dec.step(cache, dec.coord_emb(c), t)
                t += 1
                sb = dec.bin_logits("size", h)
                bw = _pick(sb[0], t_size, rng)
                bh = _pick(sb[1], t_size, rng)
                s = tuple(dequantize_size_array([bw, bh], cfg.bins).tolist())
                h = dec.step(cache, dec.size_emb(s), t)
                t += 1
                h = dec.step(cache, dec.seg_emb(c, s), t)
                t += 1
                instances.append(DecodedInstance(center=c, size=s))
                seg_hiddens.append(h.copy())
                if len(instances) >= max_instances:
                    truncated = True
                    break
                nxt = _pick(dec.lm_logits(h), t_lang, rng, allowed=(vocab.coord, vocab.eoq))
                if nxt == vocab.eoq:
                    break
        results.append(DecodeResult(prompt=prompt, present=bool(instances),
                                    instances=instances, truncated=truncated))
        pending_queries.append(seg_hiddens)

    if not boxes_only:
        factor = upsample_factor or cfg.upsample_factor
        all_seg = [hh for group in pending_queries for hh in group]
        if all_seg:
            vstar, ghw = upsample_features(
                {k: ad.Var(v) for k, v in dec.p.items()}, vout, image, factor, cfg)
            qs = np.stack(all_seg) @ dec.p["segproj_w"] + dec.p["segproj_b"]
            logits = predict_mask(ad.Var(qs), vstar, ghw, image.shape[:2]).data
            i = 0
            for res, group in zip(results, pending_queries):
                for inst in res.instances:
                    inst.mask = logits[i] > 0.0
                    i += 1
                    if inst.mask.any():
                        # boxes are trivially extractable from masks; the
                        # head-decoded values remain the conditioning signal
                        c, s = mask_to_box(inst.mask)
                        inst.center = (c.x, c.y)
                        inst.size = (s.w, s.h)
                if drop_empty_masks:
                    res.instances = [x for x in res.instances if x.mask.any()]
                    res.present = bool(res.instances)
    return results


# ---------------------------------------------------------------------------
# checkpoint container

_MAGIC = b"GRNDLCKP"
_VERSION = 1


def save_checkpoint(path, cfg: ModelConfig, params: dict) -> None:
    """Versioned binary container: JSON header + named float32 LE tensors."""
    tensors = []
    payload = bytearray()
    for name in sorted(params):
        arr = params[name].data if isinstance(params[name], ad.Var) else np.asarray(params[name])
        arr = np.ascontiguousarray(arr, dtype="<f4")
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": "<f4",
                        "offset": len(payload), "nbytes": arr.nbytes})
        payload.extend(arr.tobytes())
    header = json.dumps({"config": asdict(cfg), "tensors": tensors}).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQ", _VERSION, len(header)))
        fh.write(header)
        fh.write(bytes(payload))


def load_checkpoint(path, requires_grad: bool = False) -> tuple[ModelConfig, dict[str, ad.Var]]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _MAGIC:
            raise ValueError(f"not a checkpoint file (magic {magic!r})")
        version, hlen = struct.unpack("<IQ", fh.read(12))
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen))
        payload = fh.read()
    cfg = ModelConfig(**header["config"])
    params = {}
    for spec in header["tensors"]:
        raw = payload[spec["offset"]:spec["offset"] + spec["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f4").reshape(spec["shape"]).copy()
        params[spec["name"]] = ad.Var(arr.astype(cfg.np_dtype), requires_grad=requires_grad)
    return cfg, params
