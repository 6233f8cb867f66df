import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from humanvol.io import read_grid, read_map, write_grid, write_map
from humanvol.meshes import MeshError, TemplateMesh, box, enclosed_volume, icosphere, read_obj, write_obj
from humanvol.semantic import (
    FitTransform,
    assign_semantic_codes,
    build_semantic_volume,
    closest_point_on_triangles,
    render_semantic_map,
    voxelize,
)


def _cube_mesh():
    m = box([0, 0, 0], [2, 2, 2])
    return m


class TestCodes:
    def test_endpoints(self):
        codes = assign_semantic_codes(_cube_mesh())
        v = _cube_mesh().rest_vertices
        np.testing.assert_array_equal(codes[np.all(v == 0, axis=1)], [[0, 0, 0]])
        np.testing.assert_array_equal(codes[np.all(v == 2, axis=1)], [[1, 1, 1]])

    def test_hand_evaluated(self):
        m = _cube_mesh()
        m = TemplateMesh(np.vstack([m.vertices, [[1, 0.5, 2]]]), m.faces, np.vstack([m.rest_vertices, [[1, 0.5, 2]]]))
        np.testing.assert_allclose(assign_semantic_codes(m)[-1], [0.5, 0.25, 1.0])

    def test_zero_extent_rejected(self):
        m = TemplateMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
        with pytest.raises(MeshError, match="axis 2"):
            assign_semantic_codes(m)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_pose_invariant(self, seed):
        rng = np.random.default_rng(seed)
        m = icosphere(1)
        posed = TemplateMesh(m.vertices + rng.normal(size=m.vertices.shape), m.faces, m.rest_vertices)
        np.testing.assert_array_equal(assign_semantic_codes(posed), assign_semantic_codes(m))
        c = assign_semantic_codes(posed)
        assert c.min() >= 0 and c.max() <= 1


class TestFit:
    def test_centred_with_margin(self):
        m = box([-1, -3, -1], [1, 3, 1])
        fit = FitTransform.fit(m.vertices, (32, 48, 32))
        g = fit.apply(m.vertices)
        assert g[:, 1].max() - g[:, 1].min() == pytest.approx(0.9 * 48)
        np.testing.assert_allclose((g.min(0) + g.max(0)) / 2, [15.5, 23.5, 15.5])
        np.testing.assert_allclose(fit.invert(g), m.vertices)


class TestVoxelize:
    def test_cube_block(self):
        m = box([1.5, 1.5, 1.5], [9.5, 9.5, 9.5])
        occ = voxelize(m, (12, 12, 12))
        assert occ.sum() == 512
        assert occ[2:10, 2:10, 2:10].all()

    def test_cube_on_voxel_centres(self):
        # faces pass exactly through voxel centres; perturbation keeps counts consistent
        m = box([2, 2, 2], [6, 6, 6])
        occ = voxelize(m, (9, 9, 9))
        assert occ[3:6, 3:6, 3:6].all()
        assert occ[:, :, :2].sum() == 0 and occ[:2].sum() == 0

    def test_empty_region(self):
        m = box([1.5, 1.5, 1.5], [4.5, 4.5, 4.5])
        occ = voxelize(m, (16, 16, 16))
        assert occ[6:].sum() == 0 and occ[:, 6:].sum() == 0 and occ[:, :, 6:].sum() == 0

    def test_sphere_volume(self):
        m = icosphere(5, radius=20.0, center=(31.7, 31.3, 31.9))
        occ = voxelize(m, (64, 64, 64))
        exact = 4.0 / 3.0 * np.pi * 20 ** 3
        assert abs(occ.sum() - exact) / exact < 0.02

    def test_rejects_open_mesh(self):
        m = box([0, 0, 0], [1, 1, 1])
        open_mesh = TemplateMesh(m.vertices, m.faces[:-1])
        with pytest.raises(MeshError, match="not watertight: edge"):
            voxelize(open_mesh, (4, 4, 4))

    def test_projection_matches_render_mask(self):
        m = icosphere(3, radius=9.0, center=(15.2, 16.1, 12.4))
        occ = voxelize(m, (32, 32, 32))
        smap = render_semantic_map(m, assign_semantic_codes(m), (32, 32))
        sil = occ.max(axis=2).T.astype(bool)
        mask = smap.any(axis=2) | render_mask(m, 32, 32)
        diff = sil ^ mask
        # allow one-pixel tolerance along the silhouette boundary
        from scipy.ndimage import binary_dilation, binary_erosion
        boundary = binary_dilation(mask) & ~binary_erosion(mask)
        assert not (diff & ~boundary).any()


def render_mask(m, w, h):
    from humanvol.raster import rasterize
    return rasterize(m.triangles, w, h).mask


def brute_nearest(p, verts, faces):
    best = (np.inf, None, None)
    for fi, f in enumerate(faces):
        a, b, c = verts[f]
        # dense barycentric sampling is too coarse; use closed-form on a single triangle
        cp, w = closest_point_on_triangles(p[None], a[None], b[None], c[None])
        d = np.linalg.norm(cp[0] - p)
        if d < best[0]:
            best = (d, fi, w[0])
    return best


def brute_closest_on_triangle(p, a, b, c, n=400):
    """Dense sampling of the triangle; an independent check of the region logic."""
    s, t = np.meshgrid(np.linspace(0, 1, n), np.linspace(0, 1, n))
    keep = s + t <= 1
    s, t = s[keep], t[keep]
    pts = a + s[:, None] * (b - a) + t[:, None] * (c - a)
    return np.linalg.norm(pts - p, axis=1).min()


class TestSemanticVolume:
    @pytest.mark.parametrize("seed", range(5))
    def test_closest_point_vs_sampling(self, seed):
        rng = np.random.default_rng(seed)
        a, b, c = rng.normal(size=(3, 3))
        for p in rng.normal(size=(20, 3)) * 2:
            cp, w = closest_point_on_triangles(p[None], a[None], b[None], c[None])
            d = np.linalg.norm(cp[0] - p)
            assert d <= brute_closest_on_triangle(p, a, b, c) + 1e-9
            assert d >= brute_closest_on_triangle(p, a, b, c) - 5e-3
            assert np.all(w >= -1e-12) and w.sum() == pytest.approx(1.0)

    def test_vertex_coincident_voxel(self):
        m = box([1.0, 1.0, 1.0], [6.0, 6.0, 6.0])
        # put a vertex on a voxel centre inside the occupied region boundary
        codes = np.random.default_rng(0).uniform(size=(8, 3))
        occ = np.zeros((8, 8, 8), np.uint8)
        occ[1, 1, 1] = 1
        vol = build_semantic_volume(m, codes, (8, 8, 8), occupancy=occ)
        np.testing.assert_allclose(vol[1, 1, 1], codes[0])

    def test_uniform_codes(self):
        m = icosphere(3, radius=6, center=(8, 8, 8))
        c = np.array([0.2, 0.4, 0.9])
        vol = build_semantic_volume(m, np.tile(c, (len(m.vertices), 1)), (16, 16, 16))
        occ = vol.any(axis=3)
        assert occ.sum() > 100
        np.testing.assert_allclose(vol[occ], np.tile(c, (occ.sum(), 1)))
        assert np.all(vol[~occ] == 0)

    def test_two_triangle_probe_vs_brute_force(self):
        verts = np.array([[0, 0, 0], [4, 0, 0], [0, 4, 0], [4, 4, 3.0]])
        faces = np.array([[0, 1, 2], [1, 3, 2]])
        codes = np.random.default_rng(1).uniform(size=(4, 3))
        from humanvol.semantic import nearest_surface
        rng = np.random.default_rng(2)
        for p in rng.uniform(-1, 5, size=(30, 3)):
            f, w, d = nearest_surface(p[None], verts, faces)
            bd, bf, bw = brute_nearest(p, verts, faces)
            assert d[0] == pytest.approx(bd, abs=1e-12)
            np.testing.assert_allclose(w[0] @ codes[faces[f[0]]], bw @ codes[faces[bf]], atol=1e-9)


class TestSemanticMap:
    def test_parallel_triangle_constant(self):
        m = TemplateMesh([[1, 1, 3], [10, 1, 3], [1, 10, 3]], [[0, 1, 2]], [[0, 0, 0], [1, 0, 0], [0, 1, 1]])
        c = np.array([0.3, 0.6, 0.1])
        smap = render_semantic_map(m, np.tile(c, (3, 1)), (12, 12))
        covered = smap.any(axis=2)
        assert covered.sum() > 20
        np.testing.assert_allclose(smap[covered], np.tile(c, (covered.sum(), 1)))

    def test_empty_mesh(self):
        m = TemplateMesh(np.zeros((0, 3)), np.zeros((0, 3), int))
        assert not render_semantic_map(m, np.zeros((0, 3)), (6, 5)).any()

    @pytest.mark.parametrize("seed", range(5))
    def test_depth_order_vs_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        verts = np.vstack([rng.uniform(0, 15, (3, 2)), rng.uniform(0, 15, (3, 2))])
        verts = np.hstack([verts, rng.uniform(0, 10, (6, 1))])
        faces = np.array([[0, 1, 2], [3, 4, 5]])
        codes = rng.uniform(size=(6, 3))
        m = TemplateMesh(verts, faces)
        smap = render_semantic_map(m, codes, (16, 16))
        for y in range(16):
            for x in range(16):
                best_z, best_c = np.inf, np.zeros(3)
                for f in faces:
                    a, b, c = verts[f]
                    mat = np.array([[a[0] - c[0], b[0] - c[0]], [a[1] - c[1], b[1] - c[1]]])
                    if abs(np.linalg.det(mat)) < 1e-12:
                        continue
                    l1, l2 = np.linalg.solve(mat, [x - c[0], y - c[1]])
                    w = np.array([l1, l2, 1 - l1 - l2])
                    if np.all(w > 1e-9):
                        z = w @ verts[f][:, 2]
                        if z < best_z:
                            best_z, best_c = z, w @ codes[f]
                if np.isfinite(best_z):
                    np.testing.assert_allclose(smap[y, x], best_c, atol=1e-9)


class TestFormats:
    def test_grid_round_trip(self, tmp_path):
        v = np.random.default_rng(0).uniform(size=(3, 4, 5, 2)).astype(np.float32)
        write_grid(tmp_path / "v.dhvg", v)
        np.testing.assert_array_equal(read_grid(tmp_path / "v.dhvg"), v)
        raw = (tmp_path / "v.dhvg").read_bytes()
        assert raw[:4] == b"DHVG"
        # z-major, then y, then x, channels innermost
        second = np.frombuffer(raw[24:32], "<f4")
        np.testing.assert_array_equal(second, v[0, 0, 0])
        x1 = np.frombuffer(raw[24 + 8:24 + 16], "<f4")
        np.testing.assert_array_equal(x1, v[1, 0, 0])

    def test_map_round_trip(self, tmp_path):
        m = np.random.default_rng(1).uniform(size=(6, 4, 3)).astype(np.float32)
        write_map(tmp_path / "m.dhvg", m)
        np.testing.assert_array_equal(read_map(tmp_path / "m.dhvg"), m)
        raw = (tmp_path / "m.dhvg").read_bytes()
        np.testing.assert_array_equal(np.frombuffer(raw[24:], "<f4").reshape(6, 4, 3), m)

    def test_obj_round_trip(self, tmp_path):
        m = icosphere(1)
        cols = assign_semantic_codes(m)
        write_obj(tmp_path / "s.obj", m.vertices, m.faces, cols)
        v, f, c = read_obj(tmp_path / "s.obj")
        np.testing.assert_allclose(v, m.vertices, atol=1e-8)
        np.testing.assert_array_equal(f, m.faces)
        np.testing.assert_allclose(c, cols, atol=1e-8)

    def test_primitives_outward(self):
        b = box([0, 0, 0], [1, 2, 3])
        assert enclosed_volume(b.vertices, b.faces) == pytest.approx(6.0)
        s = icosphere(2)
        assert enclosed_volume(s.vertices, s.faces) > 0
