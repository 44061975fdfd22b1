import numpy as np
import pytest

from sdftrack.codebook import (
    CODE_DIM,
    Codebook,
    build_codebook,
    encode,
    likelihoods,
    load_codebook,
    query,
    save_codebook,
)
from sdftrack.errors import CodebookFormatError
from sdftrack.geometry import build_rotation_grid, rotation_error_deg
from sdftrack.render import (
    REFERENCE_DISTANCE,
    REFERENCE_INTRINSICS,
    NormalizedDepthMap,
    render_normalized,
)
from sdftrack.shape import canonical_latent, get_basis

RNG = np.random.default_rng(5512)


def make_map(values):
    values = np.asarray(values, dtype=float)
    return NormalizedDepthMap(data=values, valid=np.ones(values.shape, bool))


def random_map(S=64):
    return make_map(RNG.uniform(0.05, 0.95, size=(S, S)))


@pytest.fixture(scope="module")
def camera_codebook():
    basis = get_basis("camera")
    return build_codebook(basis, canonical_latent(basis), build_rotation_grid(30.0))


class TestEncode:
    def test_constant_map_gives_zero_code(self):
        code = encode(make_map(np.full((64, 64), 0.7)))
        assert np.all(code == 0.0)

    def test_self_cosine_is_one(self):
        code = encode(random_map())
        assert np.dot(code, code) == pytest.approx(1.0, abs=1e-12)

    def test_offset_invariance(self):
        vals = RNG.uniform(0.1, 0.6, size=(64, 64))
        a = encode(make_map(vals))
        b = encode(make_map(vals + 0.1))
        assert np.allclose(a, b, atol=1e-9)

    def test_block_mean_oracle(self):
        vals = RNG.uniform(0.0, 1.0, size=(32, 32))
        code = encode(make_map(vals))
        blocks = np.empty((16, 16))
        for i in range(16):
            for j in range(16):
                blocks[i, j] = vals[2 * i : 2 * i + 2, 2 * j : 2 * j + 2].mean()
        v = blocks.ravel() - blocks.mean()
        expect = v / np.linalg.norm(v)
        assert np.allclose(code, expect, atol=1e-12)

    def test_small_resolution_rejected(self):
        with pytest.raises(ValueError):
            encode(make_map(np.zeros((8, 8))))
        with pytest.raises(ValueError):
            encode(make_map(np.zeros((24, 24))))


class TestBuild:
    def test_coarse_grid_row_count(self):
        basis = get_basis("camera")
        cb = build_codebook(basis, canonical_latent(basis), build_rotation_grid(90.0))
        assert cb.size == 48
        assert cb.dim == CODE_DIM
        assert cb.codes.dtype == np.float32

    def test_rebuild_is_bit_identical(self):
        basis = get_basis("camera")
        grid = build_rotation_grid(90.0)
        a = build_codebook(basis, canonical_latent(basis), grid)
        b = build_codebook(basis, canonical_latent(basis), grid)
        assert np.array_equal(a.codes, b.codes)

    def test_rows_match_single_renders(self, camera_codebook):
        basis = get_basis("camera")
        lat = canonical_latent(basis)
        for j in (3, 77, 512, 1001):
            nm = render_normalized(
                basis, lat, camera_codebook.grid.quats[j],
                REFERENCE_DISTANCE, 1.0, REFERENCE_INTRINSICS,
            )
            expect = encode(nm).astype(np.float32)
            assert np.array_equal(camera_codebook.codes[j], expect)

    def test_self_retrieval_within_one_step(self, camera_codebook):
        cb = camera_codebook
        picks = RNG.choice(cb.size, size=50, replace=False)
        hits = 0
        for j in picks:
            sims = query(cb, cb.codes[j])
            best = int(np.argmax(sims))
            err = rotation_error_deg(cb.grid.quats[j], cb.grid.quats[best])
            if err <= cb.grid.step_deg + 1e-6:
                hits += 1
        assert hits == len(picks)

    def test_meta_records_build_config(self, camera_codebook):
        meta = camera_codebook.meta
        assert meta["category"] == "camera"
        assert meta["grid_step_deg"] == 30.0
        assert meta["render"]["z0"] == REFERENCE_DISTANCE


class TestQuery:
    def test_self_match_attains_max(self, camera_codebook):
        cb = camera_codebook
        sims = query(cb, cb.codes[17])
        assert int(np.argmax(sims)) == 17
        assert sims[17] == pytest.approx(1.0, abs=1e-6)
        assert sims.max() <= 1.0

    def test_zero_code_gives_zeros(self, camera_codebook):
        sims = query(camera_codebook, np.zeros(CODE_DIM))
        assert np.all(sims == 0.0)

    def test_negation_antisymmetry(self, camera_codebook):
        code = encode(random_map())
        a = query(camera_codebook, code)
        b = query(camera_codebook, -code)
        assert np.allclose(a, -b, atol=1e-6)

    def test_dimension_mismatch(self, camera_codebook):
        with pytest.raises(ValueError):
            query(camera_codebook, np.zeros(100))


class TestLikelihoods:
    def test_peak_value(self):
        out = likelihoods(np.array([0.9, 0.5]), 0.9)
        assert out[0] == 1.0

    def test_one_sigma_value(self):
        out = likelihoods(np.array([0.9 - 0.05]), 0.9, sigma_phi=0.05)
        assert out[0] == pytest.approx(np.exp(-0.5), abs=1e-12)

    def test_far_tail_truncates_to_zero(self):
        out = likelihoods(np.array([0.9 - 10 * 0.05]), 0.9, sigma_phi=0.05)
        assert out[0] == 0.0

    def test_monotone_in_similarity(self):
        sims = np.sort(RNG.uniform(-1.0, 1.0, size=200))
        out = likelihoods(sims, 1.0)
        assert np.all(np.diff(out) >= 0.0)

    def test_bad_sigma(self):
        with pytest.raises(ValueError):
            likelihoods(np.array([0.5]), 0.9, sigma_phi=0.0)


class TestPersistence:
    def test_roundtrip_bits(self, camera_codebook, tmp_path):
        p = tmp_path / "cb.icbk"
        save_codebook(p, camera_codebook)
        back = load_codebook(p)
        assert np.array_equal(back.codes, camera_codebook.codes)
        assert back.grid.step_deg == camera_codebook.grid.step_deg
        assert back.meta == camera_codebook.meta
        p2 = tmp_path / "cb2.icbk"
        save_codebook(p2, back)
        assert p.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.icbk"
        p.write_bytes(b"NOPE" + bytes(32))
        with pytest.raises(CodebookFormatError):
            load_codebook(p)

    def test_truncated_codes(self, camera_codebook, tmp_path):
        p = tmp_path / "cb.icbk"
        save_codebook(p, camera_codebook)
        blob = p.read_bytes()
        p.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(CodebookFormatError):
            load_codebook(p)

    def test_short_header(self, tmp_path):
        p = tmp_path / "tiny.icbk"
        p.write_bytes(b"IC")
        with pytest.raises(CodebookFormatError):
            load_codebook(p)


def test_codebook_row_validation():
    grid = build_rotation_grid(180.0)
    bad = np.full((8, CODE_DIM), 0.5, dtype=np.float32)
    with pytest.raises(ValueError):
        Codebook(grid=grid, codes=bad)
