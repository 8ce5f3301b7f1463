import numpy as np
import pytest

from groundling import autodiff as ad
from groundling.geometry import Center, Size2D
from groundling.model import (
    DecodedInstance, ModelConfig, decode, embed, forward, init_params,
    load_checkpoint, patchify, predict_mask, resize_image, save_checkpoint,
    upsample_features,
)
from groundling.posenc import fourier_features
from groundling.seqformat import (ROLE_COORD, ROLE_SEG, Instance, Vocab, pack,
                                  serialize_sample)

V = Vocab()
CFG = ModelConfig(layers=2, d_model=32, n_heads=2, image_size=32, patch=8,
                  bins=32, head_hidden=16, dtype="float64")


def make_seq(seed=0, queries=None, cfg=CFG):
    rng = np.random.default_rng(seed)
    side = cfg.image_size
    img = (rng.random((side, side, 3)) * 255).astype(np.uint8)
    if queries is None:
        m = np.zeros((side, side), bool)
        m[4:14, 6:16] = True
        queries = [("red circle", [Instance(Center(0.33, 0.28), Size2D(0.3, 0.3), m)]),
                   ("cat", [])]
    grid = (side // cfg.patch, side // cfg.patch)
    seq = serialize_sample(grid, queries, V, sample_id=f"s{seed}")
    seq.image = img
    return seq


class TestConfig:
    def test_head_dim_divisibility(self):
        with pytest.raises(ValueError):
            ModelConfig(d_model=60, n_heads=6)  # head_dim 10 not multiple of 4

    def test_heads_divide_width(self):
        with pytest.raises(ValueError):
            ModelConfig(d_model=64, n_heads=5)

    def test_bad_upsample_factor(self):
        with pytest.raises(ValueError):
            ModelConfig(upsample_factor=3)

    def test_toy_defaults(self):
        cfg = ModelConfig()
        assert (cfg.layers, cfg.d_model, cfg.patch, cfg.image_size) == (4, 64, 8, 64)


class TestEmbed:
    def test_all_text_is_table_lookup(self):
        seq = make_seq(queries=[("abc", [])])
        batch = pack([seq], 500)[0]
        params = init_params(CFG)
        out = embed(params, batch, CFG)
        n = seq.n_image
        table = params["tok_emb"].data[batch.tokens[n:]]
        assert np.allclose(out.data[n:], table)

    def test_coord_position_is_fourier_projection_not_table(self):
        from groundling.model import value_features
        seq = make_seq()
        batch = pack([seq], 500)[0]
        params = init_params(CFG)
        out = embed(params, batch, CFG)
        slot = int(np.nonzero(batch.roles == ROLE_COORD)[0][0])
        gamma = value_features(batch.centers[slot][None], CFG)[0]
        expect = gamma @ params["fcoord_w"].data + params["fcoord_b"].data
        assert np.allclose(out.data[slot], expect)
        assert not np.allclose(out.data[slot], params["tok_emb"].data[V.coord])

    def test_identical_coords_identical_embeddings(self):
        m = np.zeros((32, 32), bool)
        m[2:6, 2:6] = True
        q = [("a", [Instance(Center(0.4, 0.4), Size2D(0.2, 0.2), m),
                    Instance(Center(0.4, 0.4), Size2D(0.2, 0.2), m)])]
        seq = make_seq(queries=q)
        batch = pack([seq], 500)[0]
        out = embed(init_params(CFG), batch, CFG)
        slots = np.nonzero(batch.roles == ROLE_COORD)[0]
        assert np.array_equal(out.data[slots[0]], out.data[slots[1]])

    def test_missing_target_raises(self):
        seq = make_seq()
        batch = pack([seq], 500)[0]
        batch.inject_centers[np.nonzero(batch.roles == ROLE_COORD)[0][0]] = np.nan
        with pytest.raises(ValueError, match="teacher forcing"):
            embed(init_params(CFG), batch, CFG)


class TestForward:
    def test_deterministic(self):
        seq = make_seq()
        batch = pack([seq], 500)[0]
        params = init_params(CFG)
        a = forward(params, batch, CFG, with_masks=False)
        b = forward(params, batch, CFG, with_masks=False)
        assert np.array_equal(a.lm_logits.data, b.lm_logits.data)

    def test_zero_lm_head_gives_constant_logits(self):
        seq = make_seq()
        batch = pack([seq], 500)[0]
        params = init_params(CFG)
        params["lm_w"].data[:] = 0.0
        out = forward(params, batch, CFG, with_masks=False)
        assert np.allclose(out.lm_logits.data, out.lm_logits.data[0, 0])

    def test_packing_equivalence_and_permutation(self):
        params = init_params(CFG)
        seqs = [make_seq(seed=i) for i in range(3)]
        packed = forward(params, pack(seqs, 2000)[0], CFG, with_masks=False)
        perm = [seqs[2], seqs[0], seqs[1]]
        permuted = forward(params, pack(perm, 2000)[0], CFG, with_masks=False)
        singles = {id(s): forward(params, pack([s], 2000)[0], CFG, with_masks=False)
                   for s in seqs}
        row = 0
        for s in seqs:
            ref = singles[id(s)].lm_logits.data
            assert np.allclose(packed.lm_logits.data[row:row + len(s)], ref, atol=1e-10)
            row += len(s)
        row = 0
        for s in perm:
            ref = singles[id(s)].lm_logits.data
            assert np.allclose(permuted.lm_logits.data[row:row + len(s)], ref, atol=1e-10)
            row += len(s)

    def test_heads_fire_only_at_role_positions(self):
        seq = make_seq()
        batch = pack([seq], 500)[0]
        out = forward(init_params(CFG), batch, CFG, with_masks=False)
        assert out.coord_logits.shape == (1, 2, CFG.bins)
        assert out.size_logits.shape == (1, 2, CFG.bins)
        assert out.seg_queries.shape == (1, CFG.upsampler_dim)
        assert (batch.roles[out.coord_slots] == ROLE_COORD).all()

    def test_nan_abort_names_layer(self):
        seq = make_seq()
        batch = pack([seq], 500)[0]
        params = init_params(CFG)
        # inf - inf in the attention scores produces NaN activations
        params["l1.wq"].data[:] = 1e200
        params["l1.wk"].data[:] = 1e200
        with pytest.raises(FloatingPointError, match="layer 1"):
            forward(params, batch, CFG, with_masks=False)

    def test_masked_position_isolation(self):
        # zeroing a non-attended position's token leaves a query block's
        # output unchanged (query_masked mode isolates blocks)
        params = init_params(CFG)
        seq = make_seq(queries=[("ab", []), ("cd", [])])
        batch = pack([seq], 500)[0]
        base = forward(params, batch, CFG, mode="query_masked", with_masks=False)
        mutated = make_seq(queries=[("xy", []), ("cd", [])])  # change block 1 text
        batch2 = pack([mutated], 500)[0]
        out2 = forward(params, batch2, CFG, mode="query_masked", with_masks=False)
        b2 = np.nonzero(batch.blocks == 2)[0]
        assert np.allclose(base.hidden.data[b2], out2.hidden.data[b2], atol=1e-12)


class TestUpsampler:
    def test_factor_one_matches_patch_grid(self):
        params = init_params(CFG)
        rng = np.random.default_rng(0)
        img = (rng.random((32, 32, 3)) * 255).astype(np.uint8)
        vout = ad.Var(rng.normal(size=(16, CFG.d_model)))
        vstar, grid = upsample_features(params, vout, img, 1, CFG)
        assert grid == (4, 4) and vstar.shape == (16, CFG.upsampler_dim)

    def test_bad_factor(self):
        params = init_params(CFG)
        img = np.zeros((32, 32, 3), np.uint8)
        with pytest.raises(ValueError):
            upsample_features(params, ad.Var(np.zeros((16, CFG.d_model))), img, 3, CFG)

    def test_factor_scales_grid(self):
        params = init_params(CFG)
        rng = np.random.default_rng(3)
        img = (rng.random((32, 32, 3)) * 255).astype(np.uint8)
        vout = ad.Var(rng.normal(size=(16, CFG.d_model)))
        for f in (1, 2, 4, 8):
            vstar, grid = upsample_features(params, vout, img, f, CFG)
            assert grid == (4 * f, 4 * f)
            assert vstar.shape == (16 * f * f, CFG.upsampler_dim)

    def test_constant_inputs_give_constant_rows_modulo_position(self):
        # with a constant image and constant V_out, attention output is the
        # same value mixture everywhere; only the positional residual varies
        params = init_params(CFG)
        for k in params.values():
            pass
        img = np.full((32, 32, 3), 128, np.uint8)
        vout = ad.Var(np.ones((16, CFG.d_model)))
        params["up_wr"].data[:] = 0.0  # silence the positional residual
        params["pix_w1"].data[27:, :] = 0.0  # ignore positional input channels
        vstar, _ = upsample_features(params, vout, img, 2, CFG)
        assert np.allclose(vstar.data, vstar.data[0], atol=1e-10)


class TestPredictMask:
    def test_zero_query_gives_half_probability(self):
        vstar = ad.Var(np.random.default_rng(0).normal(size=(16, 8)))
        q = ad.Var(np.zeros((1, 8)))
        logits = predict_mask(q, vstar, (4, 4), (8, 8))
        assert np.allclose(logits.data, 0.0)
        assert logits.shape == (1, 8, 8)

    def test_sign_separation(self):
        q = np.random.default_rng(1).normal(size=(1, 8))
        vstar = ad.Var(np.concatenate([np.repeat(q * 3, 8, 0), np.repeat(-q * 3, 8, 0)]))
        logits = predict_mask(ad.Var(q), vstar, (4, 4), (4, 4))
        flat = logits.data.reshape(-1)
        assert (flat[:8] > 0).all() and (flat[8:] < 0).all()


class TestDecode:
    def _trainedish(self):
        return init_params(CFG)

    def test_greedy_deterministic(self):
        params = self._trainedish()
        img = make_seq().image
        a = decode(params, CFG, img, ["red circle"], V, mode="greedy", max_instances=4)
        b = decode(params, CFG, img, ["red circle"], V, mode="greedy", max_instances=4)
        assert len(a) == len(b) == 1
        assert a[0].present == b[0].present
        for ia, ib in zip(a[0].instances, b[0].instances):
            assert ia.center == ib.center and ia.size == ib.size
            assert np.array_equal(ia.mask, ib.mask)

    def test_zero_temperature_sampling_equals_greedy(self):
        params = self._trainedish()
        img = make_seq().image
        g = decode(params, CFG, img, ["ab"], V, mode="greedy", max_instances=3)
        s = decode(params, CFG, img, ["ab"], V, mode="sample",
                   temperatures=(0.0, 0.0, 0.0), max_instances=3, seed=5)
        assert g[0].present == s[0].present
        for ia, ib in zip(g[0].instances, s[0].instances):
            assert ia.center == ib.center and ia.size == ib.size

    def test_truncation_flag(self):
        params = self._trainedish()
        # force <present> and then always-continue by biasing the lm head
        params["lm_b"].data[V.present] = 50.0
        params["lm_b"].data[V.coord] = 50.0
        img = make_seq().image
        res = decode(params, CFG, img, ["ab"], V, mode="greedy", max_instances=3)
        assert res[0].truncated and len(res[0].instances) == 3

    def test_boxes_only_leaves_masks_none(self):
        params = self._trainedish()
        params["lm_b"].data[V.present] = 50.0
        params["lm_b"].data[V.eoq] = 49.0  # one instance then stop
        img = make_seq().image
        res = decode(params, CFG, img, ["ab"], V, mode="greedy", max_instances=5,
                     boxes_only=True)
        assert res[0].present and all(i.mask is None for i in res[0].instances)

    def test_empty_prompts_rejected(self):
        with pytest.raises(ValueError):
            decode(self._trainedish(), CFG, make_seq().image, [], V)

    def test_teacher_forced_consistency_with_tape_forward(self):
        # the incremental KV-cache path must reproduce the packed forward on
        # a single-query sample: decode places every prompt as a fresh block
        # right after the image, which is exactly block 1 of training
        # sequences (<eos> is block-0 and never decoded)
        from groundling.model import _Decoder
        from groundling.seqformat import ROLE_SIZE
        params = self._trainedish()
        m = np.zeros((32, 32), bool)
        m[4:14, 6:16] = True
        seq = make_seq(seed=3, queries=[
            ("red circle", [Instance(Center(0.33, 0.28), Size2D(0.3, 0.3), m),
                            Instance(Center(0.7, 0.7), Size2D(0.2, 0.2), m)])])
        batch = pack([seq], 500)[0]
        ref = forward(params, batch, CFG, mode="query_masked", with_masks=False)
        dec = _Decoder(params, CFG, V)
        cache, vout, _ = dec.prefill_image(seq.image, 500)
        n = cache.n
        assert np.allclose(vout, ref.hidden.data[:n], atol=1e-12)
        t = n
        for i in range(n, len(seq) - 1):  # skip <eos>
            role = int(seq.roles[i])
            if role == ROLE_COORD:
                emb = dec.coord_emb(seq.centers[i])
            elif role == ROLE_SIZE:
                emb = dec.size_emb(seq.sizes[i])
            elif role == ROLE_SEG:
                emb = dec.seg_emb(seq.centers[i], seq.sizes[i])
            else:
                emb = dec.p["tok_emb"][int(seq.tokens[i])]
            h = dec.step(cache, emb, t)
            t += 1
            assert np.allclose(h, ref.hidden.data[i], atol=1e-10), f"position {i}"


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        params = init_params(CFG)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, CFG, params)
        cfg2, params2 = load_checkpoint(path)
        assert cfg2 == CFG
        assert set(params2) == set(params)
        for k in params:
            assert np.allclose(params[k].data, params2[k].data, atol=1e-6)

    def test_forward_agrees_after_reload(self, tmp_path):
        cfg = ModelConfig(layers=2, d_model=32, n_heads=2, image_size=32, patch=8,
                          bins=32, head_hidden=16, dtype="float32")
        params = init_params(cfg)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, cfg, params)
        _, params2 = load_checkpoint(path)
        seq = make_seq(cfg=cfg)
        batch = pack([seq], 500)[0]
        a = forward(params, batch, cfg, with_masks=False)
        b = forward(params2, batch, cfg, with_masks=False)
        assert np.array_equal(a.lm_logits.data, b.lm_logits.data)

    def test_magic_validated(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)


class TestImageOps:
    def test_patchify_shape_and_range(self):
        img = (np.random.default_rng(0).random((32, 32, 3)) * 255).astype(np.uint8)
        p = patchify(img, 8)
        assert p.shape == (16, 192) and 0 <= p.min() and p.max() <= 1.0

    def test_patchify_rejects_misaligned(self):
        with pytest.raises(ValueError):
            patchify(np.zeros((30, 32, 3)), 8)

    def test_resize_identity(self):
        img = np.random.default_rng(0).random((16, 16, 3))
        assert np.allclose(resize_image(img, (16, 16)), img)

    def test_resize_constant_stays_constant(self):
        img = np.full((16, 16, 3), 0.5)
        out = resize_image(img, (64, 64))
        assert np.allclose(out, 0.5)
