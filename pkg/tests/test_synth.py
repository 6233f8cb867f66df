import hashlib

import numpy as np
import pytest

from humanvol.meshes import enclosed_volume, is_watertight
from humanvol.semantic import FitTransform
from humanvol.synth import (
    build_corpus,
    build_skeleton,
    generate_body,
    load_corpus,
    read_manifest,
    render_item,
    sample_params,
    self_intersections,
    view_yaws,
    _rot_y,
)

DIMS = (32, 48, 32)


@pytest.fixture(scope="module")
def body():
    return generate_body(11)


@pytest.fixture(scope="module")
def items(body):
    return [render_item(body, v, yaw, DIMS, item_id=v) for v, yaw in enumerate(view_yaws(11, 4))]


class TestBodies:
    def test_zero_amplitude_equals_coarse(self):
        b = generate_body(5, detail_amplitude=0.0)
        np.testing.assert_array_equal(b.detailed.vertices, b.coarse.vertices)
        np.testing.assert_array_equal(b.detailed.faces, b.coarse.faces)

    def test_deterministic(self):
        a, b = generate_body(42), generate_body(42)
        np.testing.assert_array_equal(a.detailed.vertices, b.detailed.vertices)
        np.testing.assert_array_equal(a.coarse.faces, b.coarse.faces)

    @pytest.mark.slow
    def test_watertight_over_seeds(self):
        for seed in range(100):
            b = generate_body(seed, pitch=0.03)
            assert is_watertight(b.coarse.faces), seed
            assert is_watertight(b.detailed.faces), seed

    def test_rest_pose_is_clean(self):
        p = sample_params(3)
        rest = build_skeleton(type(p)(p.seed, p.lengths, p.radii, {k: 0.0 for k in p.angles}, p.wrinkle))
        assert self_intersections(rest) == []

    def test_rest_pose_upright(self):
        b = generate_body(8, detail_amplitude=0.0)
        rest = b.coarse.rest_vertices
        posed = b.coarse.vertices
        assert rest.shape == posed.shape and np.isfinite(rest).all()
        # rest pose is upright: the legs end up straight below the hips
        feet = rest[rest[:, 1] < rest[:, 1].min() + 0.05]
        assert np.abs(np.abs(feet[:, 0]).mean()) < 0.2

    def test_detail_lies_outside_coarse(self, body):
        assert enclosed_volume(body.detailed.vertices, body.detailed.faces) > \
            enclosed_volume(body.coarse.vertices, body.coarse.faces)

    def test_yaws_spread(self):
        y = view_yaws(9, 4)
        assert np.all((y >= 0) & (y < 2 * np.pi))
        np.testing.assert_allclose(np.diff(np.sort(y)), np.pi / 2, atol=1e-12)


class TestItems:
    def test_shapes(self, items):
        it = items[0]
        X, Y, Z = DIMS
        assert it.image.shape == (Y, X, 3)
        assert it.semantic_map.shape == (Y, X, 3)
        assert it.semantic_volume.shape == (X, Y, Z, 3)
        assert it.occupancy.shape == DIMS
        assert it.sil_front.shape == (Y, X) and it.sil_side.shape == (Y, Z)
        assert it.normal.shape == (2 * Y, 2 * X, 3)

    def test_front_silhouette_is_projection(self, items):
        for it in items:
            np.testing.assert_array_equal(it.sil_front, it.occupancy.max(axis=2).T)
            assert set(np.unique(it.occupancy)) <= {0.0, 1.0}

    def test_normals_unit_or_zero(self, items):
        for it in items:
            n = np.linalg.norm(it.normal, axis=-1)
            assert np.all((n == 0) | (np.abs(n - 1) < 1e-4))
            assert (n > 0).sum() > 100

    def test_views_differ(self, items):
        sils = [it.sil_front for it in items]
        for i in range(4):
            for j in range(i + 1, 4):
                assert not np.array_equal(sils[i], sils[j])

    def test_body_inside_clothing(self, items):
        from scipy.ndimage import binary_dilation
        for it in items:
            coarse = it.coarse_occupancy() > 0
            det = binary_dilation(it.occupancy > 0, iterations=3)
            assert (coarse & det).sum() >= 0.95 * coarse.sum()

    def test_camera_consistency(self, items):
        from scipy.ndimage import binary_dilation
        for it in items:
            fg = np.abs(it.semantic_map).sum(-1) > 0
            sil = binary_dilation(it.sil_front > 0, iterations=1)
            assert not (fg & ~sil).any()

    def test_codes_in_range(self, items):
        for it in items:
            assert it.semantic_volume.min() >= 0 and it.semantic_volume.max() <= 1
            assert it.semantic_map.min() >= 0 and it.semantic_map.max() <= 1


def test_capsule_flank_normals():
    """Ground-truth normals on the torso flank match the analytic capsule normal."""
    body = generate_body(21, detail_amplitude=0.0)
    yaw = 0.3
    it = render_item(body, 0, yaw, (64, 96, 64))
    caps = body.skeleton
    rot = _rot_y(yaw)
    fit = FitTransform.fit(body.detailed.vertices @ rot.T, (64, 96, 64))
    torso = caps[0]
    a, b = fit.apply((rot @ torso.a)[None])[0], fit.apply((rot @ torso.b)[None])[0]
    radius = torso.radius * fit.scale
    rows, cols = np.nonzero(np.linalg.norm(it.normal, axis=-1) > 0)
    n = it.normal[rows, cols]
    x, y = cols / 2.0, rows / 2.0
    # pixels over the torso's straight section, well inside its silhouette
    t = (y - a[1]) / (b[1] - a[1])
    lateral = np.abs(x - (a[0] + t * (b[0] - a[0])))
    sel = (t > 0.2) & (t < 0.8) & (lateral < 0.7 * radius) & (n[:, 2] < -0.5)
    assert sel.sum() > 20
    axis_pt = a + t[sel, None] * (b - a)
    depth = axis_pt[:, 2] - np.sqrt(np.maximum(radius ** 2 - (x[sel] - axis_pt[:, 0]) ** 2, 0))
    surf = np.stack([x[sel], y[sel], depth], 1)
    d = surf - axis_pt
    d[:, 1] = 0.0
    analytic = d / np.linalg.norm(d, axis=1, keepdims=True)
    cos_dist = 1 - np.sum(n[sel] * analytic, axis=1)
    assert cos_dist.mean() < 0.05


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    build_corpus(root, 2, 2, DIMS, seed=3)
    return root


class TestCorpus:
    def test_counts_and_manifest(self, corpus):
        rows = read_manifest(corpus)
        assert len(rows) == 4
        assert (corpus / "item_00003" / "normal.dhvg").exists()

    def test_deterministic_manifest(self, corpus, tmp_path):
        build_corpus(tmp_path / "again", 2, 2, DIMS, seed=3)
        h = lambda p: hashlib.sha256(p.read_bytes()).hexdigest()  # noqa: E731
        assert h(corpus / "manifest.csv") == h(tmp_path / "again" / "manifest.csv")
        assert h(corpus / "item_00002" / "occupancy.dhvg") == h(tmp_path / "again" / "item_00002" / "occupancy.dhvg")

    def test_round_trip(self, corpus):
        from humanvol.synth import body_seed
        loaded = load_corpus(corpus)[3]
        s = body_seed(3, 1)
        fresh = render_item(generate_body(s), 1, view_yaws(s, 2)[1], DIMS, item_id=3)
        for name in ("image", "semantic_map", "semantic_volume", "occupancy", "sil_front", "sil_side", "normal",
                     "coarse_vertices", "coarse_faces", "coarse_codes", "detailed_vertices", "detailed_faces"):
            np.testing.assert_array_equal(getattr(loaded, name), getattr(fresh, name), err_msg=name)

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            build_corpus(blocker / "sub", 1, 1, DIMS)

    def test_needs_bodies(self, tmp_path):
        with pytest.raises(ValueError):
            build_corpus(tmp_path, 0, 4, DIMS)
