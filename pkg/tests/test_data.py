import colorsys
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from flowattack import data as D


def rect_scene(motion=(5, 0), seed=0):
    cfg = D.SceneConfig(num_shapes=1, shape_kinds=("rectangle",), background_translation=0,
                        shape_motions=(motion,), seed=seed)
    return D.generate_scene(cfg, return_layers=True)


class TestScenes:
    def test_deterministic(self):
        a, fa = D.generate_scene(D.SceneConfig(seed=7))
        b, fb = D.generate_scene(D.SceneConfig(seed=7))
        assert np.array_equal(a.frame_t, b.frame_t) and np.array_equal(a.frame_t1, b.frame_t1)
        assert np.array_equal(fa.u, fb.u) and np.array_equal(fa.v, fb.v)

    def test_zero_motion(self):
        cfg = D.SceneConfig(shape_translation=0, background_translation=0, seed=3)
        pair, flow = D.generate_scene(cfg)
        assert np.array_equal(pair.frame_t, pair.frame_t1)
        assert not flow.u.any() and not flow.v.any()

    def test_single_rectangle(self):
        pair, flow, (ids_t, _) = rect_scene((5, 0))
        inside = ids_t == 1
        assert inside.any() and (~inside).any()
        assert np.all(flow.u[inside] == 5) and np.all(flow.v[inside] == 0)
        assert np.all(flow.u[~inside] == 0) and np.all(flow.v[~inside] == 0)

    @pytest.mark.parametrize("seed", range(5))
    def test_warp_reconstructs_second_frame(self, seed):
        pair, flow, (ids_t, ids_t1) = D.generate_scene(D.SceneConfig(seed=seed), return_layers=True)
        H, W = pair.shape
        yy, xx = np.mgrid[0:H, 0:W]
        y2 = yy + flow.v.astype(int)
        x2 = xx + flow.u.astype(int)
        inb = (y2 >= 0) & (y2 < H) & (x2 >= 0) & (x2 < W)
        vis = inb.copy()
        vis[inb] = ids_t1[y2[inb], x2[inb]] == ids_t[inb]
        assert vis.mean() > 0.8
        err = np.abs(pair.frame_t[vis] - pair.frame_t1[y2[vis], x2[vis]]).mean()
        assert err < 1e-6

    def test_values_in_unit_range_and_valid_mask(self):
        pair, flow = D.generate_scene(D.SceneConfig(seed=11))
        assert pair.frame_t.min() >= 0 and pair.frame_t1.max() <= 1
        assert flow.valid.all() and flow.valid.shape == pair.shape

    def test_manifest_roundtrip(self, tmp_path):
        man = D.DatasetManifest.range(10, 3, D.SceneConfig(num_shapes=2, shape_motions=((1, 2), (3, 4))))
        man.save(tmp_path / "m.json")
        back = D.DatasetManifest.load(tmp_path / "m.json")
        assert back == man
        assert np.array_equal(back.sample(1)[0].frame_t, man.sample(1)[0].frame_t)


class TestNormalize:
    def test_sym_unit(self):
        pair = D.ImagePair(np.zeros((2, 2, 3)), np.ones((2, 2, 3)))
        a, b = D.normalize(pair, D.NormalizationScheme("sym_unit"))
        assert np.all(a == -1) and np.all(b == 1)
        assert np.allclose(D.denormalize_sym_unit(a), pair.frame_t.transpose(2, 0, 1))

    def test_unit_meansub(self):
        pair = D.ImagePair(np.full((2, 2, 3), 0.5), np.full((2, 2, 3), 0.5))
        a, _ = D.normalize(pair, D.NormalizationScheme("unit_meansub", (0.5, 0.5, 0.5)))
        assert np.all(a == 0)

    def test_schemes_differ_unless_means_half(self, rng):
        pair = D.ImagePair(rng.uniform(size=(4, 4, 3)), rng.uniform(size=(4, 4, 3)))
        s, _ = D.normalize(pair, D.NormalizationScheme("sym_unit"))
        m, _ = D.normalize(pair, D.NormalizationScheme("unit_meansub", (0.4, 0.5, 0.6)))
        assert not np.allclose(s, m)

    def test_channel_means(self):
        pairs = [D.ImagePair(np.full((2, 2, 3), v), np.full((2, 2, 3), v)) for v in (0.2, 0.4)]
        assert np.allclose(D.estimate_channel_means(pairs), (0.3, 0.3, 0.3))


class TestFlo:
    def test_known_bytes(self, tmp_path):
        path = tmp_path / "one.flo"
        D.write_flo(path, D.FlowField(np.array([[3.0]]), np.array([[-4.0]])))
        expected = b"PIEH" + struct.pack("<ii", 1, 1) + struct.pack("<ff", 3.0, -4.0)
        assert path.read_bytes() == expected and len(expected) == 20

    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6), st.just(2)),
                  elements=st.floats(-1e6, 1e6, width=32)))
    def test_roundtrip_bit_exact(self, tmp_path_factory, uv):
        path = tmp_path_factory.mktemp("flo") / "f.flo"
        D.write_flo(path, D.FlowField(uv[..., 0], uv[..., 1]))
        back = D.read_flo(path)
        assert back.u.tobytes() == uv[..., 0].tobytes() and back.v.tobytes() == uv[..., 1].tobytes()

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.flo").write_bytes(b"ABCD" + struct.pack("<ii", 1, 1) + b"\0" * 8)
        with pytest.raises(D.FloFormatError, match="magic"):
            D.read_flo(tmp_path / "x.flo")

    def test_truncated(self, tmp_path):
        (tmp_path / "x.flo").write_bytes(b"PIEH" + struct.pack("<ii", 2, 2) + b"\0" * 8)
        with pytest.raises(D.FloFormatError):
            D.read_flo(tmp_path / "x.flo")

    def test_non_finite_write(self, tmp_path):
        with pytest.raises(D.FloFormatError):
            D.write_flo(tmp_path / "x.flo", D.FlowField(np.array([[np.nan]]), np.array([[0.0]])))


class TestImages:
    @pytest.mark.parametrize("suffix", [".png", ".ppm"])
    def test_roundtrip_8bit(self, tmp_path, rng, suffix):
        img = rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
        D.write_image(tmp_path / f"a{suffix}", img)
        assert np.array_equal(D.read_image(tmp_path / f"a{suffix}"), img)

    def test_ppm_header(self, tmp_path):
        D.write_image(tmp_path / "a.ppm", np.zeros((5, 7, 3)))
        head = (tmp_path / "a.ppm").read_bytes().split(maxsplit=4)
        assert head[:4] == [b"P6", b"7", b"5", b"255"]

    def test_quantization_bound(self, tmp_path, rng):
        img = rng.uniform(size=(6, 6, 3))
        D.write_image(tmp_path / "a.png", img)
        back = D.read_image(tmp_path / "a.png", as_float=True)
        assert np.abs(back - img).max() <= 1 / 510 + 1e-12

    def test_unsupported_format(self, tmp_path):
        with pytest.raises(ValueError):
            D.write_image(tmp_path / "a.gif", np.zeros((2, 2, 3)))


def reference_color(u, v, max_mag):
    mag = np.hypot(u, v)
    hue = (np.arctan2(v, u) / (2 * np.pi)) % 1.0
    return colorsys.hsv_to_rgb(hue, min(mag / max_mag, 1.0), 1.0)


class TestFlowColor:
    def test_zero_flow_white(self):
        rgb = D.flow_to_color(D.FlowField(np.zeros((3, 4)), np.zeros((3, 4))))
        assert np.all(rgb == 1.0)

    def test_opposite_directions_complementary(self):
        rgb = D.flow_to_color(D.FlowField(np.array([[1.0, -1.0]]), np.array([[0.5, -0.5]])), 2.0)
        h1, s1, _ = colorsys.rgb_to_hsv(*rgb[0, 0])
        h2, s2, _ = colorsys.rgb_to_hsv(*rgb[0, 1])
        assert s1 == pytest.approx(s2)
        assert (h2 - h1) % 1.0 == pytest.approx(0.5)

    def test_unit_circle_matches_reference_wheel(self):
        ang = np.linspace(0, 2 * np.pi, 360, endpoint=False)
        rad = np.linspace(0.05, 1.0, 8)
        u = np.outer(rad, np.cos(ang))
        v = np.outer(rad, np.sin(ang))
        rgb = D.flow_to_color(D.FlowField(u, v), 1.0)
        ref = np.array([[reference_color(u[i, j], v[i, j], 1.0) for j in range(u.shape[1])]
                        for i in range(u.shape[0])])
        assert np.abs(D.quantize(rgb).astype(int) - D.quantize(ref).astype(int)).max() <= 1

    def test_saturation_monotone_in_magnitude(self):
        mags = np.linspace(0, 3, 10)[None]
        rgb = D.flow_to_color(D.FlowField(mags, np.zeros_like(mags)), 3.0)
        sat = [colorsys.rgb_to_hsv(*rgb[0, i])[1] for i in range(10)]
        assert all(b >= a for a, b in zip(sat, sat[1:]))
