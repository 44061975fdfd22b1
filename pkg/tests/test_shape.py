import numpy as np
import pytest

from sdftrack.errors import SurfaceExtractionError
from sdftrack.geometry import OBJECT_FRAME
from sdftrack.shape import (
    SPHERE_RADIUS,
    Primitive,
    ShapeBasis,
    ShapeLatent,
    basis_from_config,
    canonical_latent,
    decode_surface,
    get_basis,
    load_bases,
    make_primitive,
    primitive_values,
    sdf_eval,
    sdf_gradient,
)

RNG = np.random.default_rng(7041)

CATEGORIES = ("bottle", "bowl", "camera", "can", "laptop", "mug")


def sphere_basis():
    s = make_primitive("sphere")
    return ShapeBasis(category="test-sphere", primitives=(s, s))


def fd_gradient(basis, latent, pts, h):
    g = np.empty_like(pts)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        g[:, k] = (sdf_eval(basis, latent, pts + e) - sdf_eval(basis, latent, pts - e)) / (2 * h)
    return g


class TestPrimitiveNormalization:
    def test_sphere_radius_frozen(self):
        # 1 / (2 * sqrt(3)), the radius whose bbox diagonal is exactly 1
        assert SPHERE_RADIUS == pytest.approx(0.28867513459481287, abs=1e-15)

    def test_all_shipped_primitives_unit_diagonal(self):
        for basis in load_bases().values():
            for prim in basis.primitives:
                assert np.linalg.norm(prim.half_extents()) == pytest.approx(0.5, abs=1e-9)

    def test_every_kind_unit_diagonal(self):
        prims = [
            make_primitive("sphere"),
            make_primitive("box", half_extents=[0.4, 0.2, 0.1]),
            make_primitive("cylinder", radius=0.2, half_height=0.5),
            make_primitive("rounded_box", half_extents=[0.3, 0.2, 0.2], rounding=0.05),
            make_primitive("capsule", radius=0.15, half_height=0.3),
        ]
        for p in prims:
            assert np.linalg.norm(p.half_extents()) == pytest.approx(0.5, abs=1e-12)

    def test_sampled_surface_inside_bbox(self):
        for kind, kw in [
            ("box", {"half_extents": [0.3, 0.2, 0.1]}),
            ("cylinder", {"radius": 0.2, "half_height": 0.4}),
            ("capsule", {"radius": 0.1, "half_height": 0.3}),
            ("sphere", {}),
        ]:
            prim = make_primitive(kind, offset=(0.03, -0.02, 0.01), **kw)
            basis = ShapeBasis(category="t", primitives=(prim, prim))
            pts = decode_surface(basis, ShapeLatent(np.zeros(2)), 400, seed=3).points
            lo = prim.offset - prim.half_extents()
            hi = prim.offset + prim.half_extents()
            assert np.all(pts >= lo - 1e-6) and np.all(pts <= hi + 1e-6)
            diag = np.linalg.norm(pts.max(axis=0) - pts.min(axis=0))
            assert diag > 0.9

    def test_bad_params_rejected(self):
        with pytest.raises(ValueError):
            make_primitive("box", half_extents=[0.1, -0.2, 0.1])
        with pytest.raises(ValueError):
            make_primitive("warp-core")


class TestSdfValues:
    def test_sphere_center_value(self):
        basis = sphere_basis()
        val = sdf_eval(basis, ShapeLatent(np.zeros(2)), np.zeros((1, 3)))
        assert val[0] == pytest.approx(-0.28867513459481287, abs=1e-12)

    def test_sphere_surface_zero(self):
        basis = sphere_basis()
        p = np.array([[SPHERE_RADIUS, 0.0, 0.0]])
        assert sdf_eval(basis, ShapeLatent(np.zeros(2)), p)[0] == pytest.approx(0.0, abs=1e-12)

    def test_blend_of_identical_primitives_is_identity(self):
        prim = make_primitive("cylinder", radius=0.2, half_height=0.3)
        basis = ShapeBasis(category="t", primitives=(prim, prim))
        pts = RNG.uniform(-0.7, 0.7, size=(200, 3))
        assert np.allclose(
            sdf_eval(basis, ShapeLatent(np.zeros(2)), pts), prim.sdf(pts), atol=1e-12
        )

    def test_canonical_latent_matches_primitive0(self):
        basis = get_basis("camera")
        lat = canonical_latent(basis)
        pts = RNG.uniform(-1.0, 1.0, size=(500, 3))
        diff = sdf_eval(basis, lat, pts) - basis.primitives[0].sdf(pts)
        assert np.max(np.abs(diff)) < 1e-3

    def test_canonical_weight_value(self):
        basis = get_basis("bottle")
        lat = canonical_latent(basis)
        expect = np.exp(10.0) / (np.exp(10.0) + 3.0)
        assert lat.weights[0] == pytest.approx(expect, abs=1e-12)

    def test_inside_origin_negative_for_all_shipped(self):
        # every shipped primitive contains the origin, so any blend is negative there
        for basis in load_bases().values():
            phi = primitive_values(basis, np.zeros((1, 3)))
            assert np.all(phi < 0.0)
            lat = ShapeLatent(RNG.normal(size=len(basis)))
            assert sdf_eval(basis, lat, np.zeros((1, 3)))[0] < 0.0

    def test_outside_bounding_sphere_positive(self):
        dirs = RNG.normal(size=(100, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        pts = dirs * 1.1
        for basis in load_bases().values():
            lat = ShapeLatent(RNG.normal(size=len(basis)))
            assert np.all(sdf_eval(basis, lat, pts) > 0.0)

    def test_lipschitz_bound(self):
        basis = get_basis("mug")
        lat = ShapeLatent(RNG.normal(size=len(basis)))
        a = RNG.uniform(-0.8, 0.8, size=(500, 3))
        b = RNG.uniform(-0.8, 0.8, size=(500, 3))
        df = np.abs(sdf_eval(basis, lat, a) - sdf_eval(basis, lat, b))
        dx = np.linalg.norm(a - b, axis=1)
        assert np.all(df <= dx * (1.0 + 1e-9) + 1e-12)

    def test_latent_length_mismatch(self):
        basis = get_basis("can")
        with pytest.raises(ValueError):
            sdf_eval(basis, ShapeLatent(np.zeros(2)), np.zeros((1, 3)))


class TestGradients:
    def test_matches_finite_differences(self):
        h = 1e-5
        for cat in CATEGORIES:
            basis = get_basis(cat)
            lat = ShapeLatent(RNG.normal(size=len(basis)))
            pts = RNG.uniform(-0.8, 0.8, size=(1000, 3))
            fd_a = fd_gradient(basis, lat, pts, h)
            fd_b = fd_gradient(basis, lat, pts, h / 2)
            # drop points straddling a gradient discontinuity of some primitive
            smooth = np.max(np.abs(fd_a - fd_b), axis=1) < 5e-5
            assert np.count_nonzero(smooth) > 850
            ana = sdf_gradient(basis, lat, pts)
            err = np.max(np.abs(ana[smooth] - fd_a[smooth]))
            assert err < 1e-4

    def test_gradient_norm_bounded(self):
        for cat in CATEGORIES:
            basis = get_basis(cat)
            lat = ShapeLatent(RNG.normal(size=len(basis)))
            pts = RNG.uniform(-0.8, 0.8, size=(500, 3))
            norms = np.linalg.norm(sdf_gradient(basis, lat, pts), axis=1)
            assert np.all(norms <= 1.0 + 1e-6)
            assert np.all(norms > 0.0)

    def test_sphere_center_convention(self):
        basis = sphere_basis()
        g = sdf_gradient(basis, ShapeLatent(np.zeros(2)), np.zeros((1, 3)))
        assert np.allclose(g[0], [0.0, 0.0, 1.0])


class TestDecodeSurface:
    def test_sphere_radius(self):
        basis = sphere_basis()
        cloud = decode_surface(basis, ShapeLatent(np.zeros(2)), 100, seed=11)
        assert cloud.frame == OBJECT_FRAME
        assert len(cloud) == 100
        r = np.linalg.norm(cloud.points, axis=1)
        assert np.max(np.abs(r - SPHERE_RADIUS)) < 1e-4

    def test_on_surface_for_blends(self):
        basis = get_basis("camera")
        lat = ShapeLatent(np.array([1.0, 0.3, -0.2, 0.4]))
        cloud = decode_surface(basis, lat, 500, seed=5)
        assert np.max(np.abs(sdf_eval(basis, lat, cloud.points))) < 1e-4

    def test_deterministic_by_seed(self):
        basis = get_basis("bowl")
        lat = ShapeLatent(np.array([0.5, 0.1, 0.0, -0.2]))
        a = decode_surface(basis, lat, 64, seed=9).points
        b = decode_surface(basis, lat, 64, seed=9).points
        c = decode_surface(basis, lat, 64, seed=10).points
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_bad_count_rejected(self):
        basis = sphere_basis()
        with pytest.raises(ValueError):
            decode_surface(basis, ShapeLatent(np.zeros(2)), 0)


class TestBasisConfig:
    def test_shipped_categories(self):
        bases = load_bases()
        assert sorted(bases) == sorted(CATEGORIES)
        for cat, basis in bases.items():
            assert len(basis) == 4
            assert basis.bounding_radius < 0.65

    def test_symmetry_axes(self):
        bases = load_bases()
        for cat in ("bottle", "bowl", "can"):
            assert np.allclose(bases[cat].symmetry_axis, [0, 1, 0])
        for cat in ("camera", "laptop", "mug"):
            assert bases[cat].symmetry_axis is None

    def test_unknown_category(self):
        with pytest.raises(KeyError):
            get_basis("teapot")

    def test_single_primitive_rejected(self):
        with pytest.raises(ValueError):
            ShapeBasis(category="t", primitives=(make_primitive("sphere"),))

    def test_config_roundtrip(self):
        cfg = {
            "symmetry_axis": None,
            "primitives": [
                {"kind": "box", "half_extents": [0.2, 0.3, 0.1]},
                {"kind": "sphere", "offset": [0.05, 0.0, 0.0]},
            ],
        }
        basis = basis_from_config("custom", cfg)
        assert len(basis) == 2
        assert basis.primitives[0].kind == "box"


class TestLatent:
    def test_weights_positive_sum_one(self):
        for _ in range(20):
            lat = ShapeLatent(RNG.normal(size=4) * 5)
            assert np.all(lat.weights > 0)
            assert np.sum(lat.weights) == pytest.approx(1.0, abs=1e-12)

    def test_too_short_rejected(self):
        with pytest.raises(ValueError):
            ShapeLatent(np.array([1.0]))
