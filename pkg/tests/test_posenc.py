import numpy as np
import pytest

from groundling.posenc import (
    FourierConfig, RopeConfig, apply_ggrope_2d, apply_rope_1d, fourier_features,
    ggrope_directions,
)

CFG = RopeConfig(head_dim=16)
RNG = np.random.default_rng(7)


class TestGGRopeDirections:
    def test_first_direction_is_unit_x(self):
        u = ggrope_directions(8)
        assert np.allclose(u[0], [1.0, 0.0])

    def test_unit_norm(self):
        u = ggrope_directions(33)
        assert np.allclose(np.linalg.norm(u, axis=1), 1.0)

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            ggrope_directions(0)

    def test_better_angular_spread_than_axial(self):
        # minimal pairwise angular gap for 16 golden-ratio directions beats
        # the axial {x, y} set (which collapses to gap 0 for n > 2 axes reused)
        def min_gap(dirs):
            ang = np.sort(np.mod(np.arctan2(dirs[:, 1], dirs[:, 0]), 2 * np.pi))
            gaps = np.diff(np.concatenate([ang, [ang[0] + 2 * np.pi]]))
            return gaps.min()

        golden = ggrope_directions(16)
        axial = np.array([[1.0, 0.0], [0.0, 1.0]] * 8)  # x/y axes repeated
        assert min_gap(golden) > min_gap(axial)


class TestRope1D:
    def test_identity_at_zero(self):
        x = RNG.normal(size=8)
        assert np.allclose(apply_rope_1d(x, 0, CFG), x)

    def test_norm_preserved(self):
        x = RNG.normal(size=(5, 8))
        y = apply_rope_1d(x, 17, CFG)
        assert np.allclose(np.linalg.norm(y, axis=-1), np.linalg.norm(x, axis=-1))

    def test_relative_position_property(self):
        # <rot(q,t1), rot(k,t2)> depends only on t1 - t2
        q = RNG.normal(size=8)
        k = RNG.normal(size=8)
        for t1, t2, delta in [(3, 11, 5), (0, 7, 123), (40, 2, -9)]:
            a = apply_rope_1d(q, t1, CFG) @ apply_rope_1d(k, t2, CFG)
            b = apply_rope_1d(q, t1 + delta, CFG) @ apply_rope_1d(k, t2 + delta, CFG)
            assert abs(a - b) < 1e-10


class TestGGRope2D:
    def test_identity_at_origin(self):
        x = RNG.normal(size=8)
        assert np.allclose(apply_ggrope_2d(x, (0, 0), CFG), x)

    def test_norm_preserved(self):
        x = RNG.normal(size=(4, 8))
        y = apply_ggrope_2d(x, (3, 5), CFG)
        assert np.allclose(np.linalg.norm(y, axis=-1), np.linalg.norm(x, axis=-1))

    def test_translation_invariance(self):
        q = RNG.normal(size=8)
        k = RNG.normal(size=8)
        for p1, p2, d in [((1, 2), (4, 6), (3, 3)), ((0, 0), (7, 1), (-2, 5))]:
            a = apply_ggrope_2d(q, p1, CFG) @ apply_ggrope_2d(k, p2, CFG)
            p1d = (p1[0] + d[0], p1[1] + d[1])
            p2d = (p2[0] + d[0], p2[1] + d[1])
            b = apply_ggrope_2d(q, p1d, CFG) @ apply_ggrope_2d(k, p2d, CFG)
            assert abs(a - b) < 1e-10


class TestRopeConfig:
    def test_head_dim_must_be_multiple_of_four(self):
        with pytest.raises(ValueError):
            RopeConfig(head_dim=10)


class TestFourier:
    def test_zero_input_gives_cos_ones_sin_zeros(self):
        cfg = FourierConfig(feature_dim=16, seed=3)
        g = fourier_features((0.0, 0.0), cfg)
        assert np.allclose(g[:8], 1.0) and np.allclose(g[8:], 0.0)

    def test_norm_identity(self):
        cfg = FourierConfig(feature_dim=64, seed=1)
        v = RNG.random((20, 2))
        g = fourier_features(v, cfg)
        assert np.allclose((g ** 2).sum(axis=-1), 32.0, atol=1e-12)

    def test_single_known_row(self):
        # with B = [[1, 0]], v = (0.25, 0.7): phase = pi/2 -> (cos, sin) = (0, 1)
        cfg = FourierConfig(feature_dim=2, seed=0)
        object.__setattr__(cfg, "projection", np.array([[1.0, 0.0]]))
        g = fourier_features((0.25, 0.7), cfg)
        assert np.allclose(g, [0.0, 1.0], atol=1e-12)

    def test_deterministic_given_seed(self):
        a = FourierConfig(feature_dim=32, seed=9)
        b = FourierConfig(feature_dim=32, seed=9)
        assert np.array_equal(a.projection, b.projection)

    def test_rejects_nonfinite(self):
        cfg = FourierConfig(feature_dim=8, seed=0)
        with pytest.raises(ValueError):
            fourier_features((np.nan, 0.1), cfg)
