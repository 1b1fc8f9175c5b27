import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pisf import physim
from pisf.arrayio import load_manifest, read_array
from pisf.fourier import fft1c, fft2c, ifft1c
from pisf.physim import (
    SynthConfig,
    adjoint_1d,
    build_dataset,
    compose_scene,
    embed_row,
    extract_row,
    forward_1d,
    forward_linear_1d,
    gen_coil_maps,
    gen_phase_map,
    intensity_stats,
    magnitude_source,
)
from pisf.sampling import achieved_af, acs_bounds, make_cartesian_1d

# Independent transcription of the modified Shepp-Logan table:
# (intensity, semi-axis x, semi-axis y, center x, center y, rotation in degrees).
TOFT_TABLE = [
    (1.0, 0.69, 0.92, 0.0, 0.0, 0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0),
]


def _phantom_value(x, y):
    total = 0.0
    for rho, a, b, x0, y0, deg in TOFT_TABLE:
        t = math.radians(deg)
        u = (x - x0) * math.cos(t) + (y - y0) * math.sin(t)
        v = -(x - x0) * math.sin(t) + (y - y0) * math.cos(t)
        if (u / a) ** 2 + (v / b) ** 2 <= 1:
            total += rho
    return total


def test_shepp_logan_range_and_corners():
    img = magnitude_source("shepp-logan", 64).values
    assert img.min() >= 0 and img.max() == 1.0
    assert img[0, 0] == img[0, -1] == img[-1, 0] == img[-1, -1] == 0.0


def test_shepp_logan_center_matches_ellipse_sum():
    raw = physim.shepp_logan(64)
    assert raw[32, 32] == pytest.approx(_phantom_value(0.0, 0.0))
    assert raw[32, 32] == pytest.approx(0.2)


def test_shepp_logan_matches_pixelwise_oracle():
    n = 32
    raw = physim.shepp_logan(n)
    for i in range(n):
        for j in range(n):
            expect = max(_phantom_value((j - n // 2) / (n / 2), -(i - n // 2) / (n / 2)), 0.0)
            assert raw[i, j] == pytest.approx(expect, abs=1e-12)


def test_blobs_normalized():
    img = magnitude_source("procedural-blobs", (40, 24), seed=4).values
    assert img.shape == (40, 24) and img.min() >= 0 and img.max() == pytest.approx(1.0)


def test_small_magnitude_rejected():
    with pytest.raises(ValueError):
        magnitude_source("shepp-logan", 8)


def test_corpus_white_image_is_constant(tmp_path):
    from PIL import Image

    Image.fromarray(np.full((30, 50, 3), 255, np.uint8)).save(tmp_path / "white.png")
    img = magnitude_source("corpus-file", 20, {"directory": tmp_path}, seed=1).values
    assert np.allclose(img, 1.0)


def test_corpus_luma_weights(tmp_path):
    from PIL import Image

    rgb = np.zeros((32, 32, 3), np.uint8)
    rgb[:16] = (255, 0, 0)
    rgb[16:] = (0, 0, 255)
    Image.fromarray(rgb).save(tmp_path / "two.png")
    img = magnitude_source("corpus-file", 32, {"directory": tmp_path}, seed=0).values
    assert img[0, 0] == pytest.approx(1.0)
    assert img[-1, -1] == pytest.approx(0.114 / 0.299)


def test_empty_corpus_rejected(tmp_path):
    with pytest.raises(ValueError, match="no images"):
        magnitude_source("corpus-file", 32, {"directory": tmp_path})


def test_unit_modulus_phase():
    for s in range(5):
        p = gen_phase_map(40, 30, 2 + s % 4, seed=s).values
        assert np.allclose(np.abs(p), 1.0, atol=1e-6)


def test_trunc_one_gives_constant_phase():
    p = gen_phase_map(16, 16, 1, seed=3).values
    assert np.allclose(p, p[0, 0])


def test_phase_same_seed_same_map():
    assert np.array_equal(gen_phase_map(16, 16, 3, 9).values, gen_phase_map(16, 16, 3, 9).values)


def test_phase_is_low_pass():
    p = gen_phase_map(64, 64, 3, seed=1).values
    k = np.abs(fft2c(p)) ** 2
    assert k[28:37, 28:37].sum() / k.sum() > 0.9


def test_single_coil_zero_phase_is_gaussian():
    S = gen_coil_maps(32, 32, 1, {"phase_slope": 0.0, "phase_offset": False}, seed=0).maps
    assert np.allclose(S.imag, 0) and (S.real > 0).all()
    assert (np.abs(S) ** 2).sum(axis=0).max() == pytest.approx(1.0)


@pytest.mark.parametrize("ncoils", [2, 4, 8])
def test_coil_invariants_sweep(ncoils):
    for seed in range(20):
        S = gen_coil_maps(64, 64, ncoils, seed=seed).maps
        assert physim.coil_map_violations(S) == []


def test_coil_same_seed():
    assert np.array_equal(gen_coil_maps(16, 16, 4, seed=2).maps, gen_coil_maps(16, 16, 4, seed=2).maps)


def test_coil_count_bounds():
    with pytest.raises(ValueError):
        gen_coil_maps(16, 16, 0)
    with pytest.raises(ValueError):
        gen_coil_maps(16, 16, 33)


def test_coil_map_file_roundtrip(tmp_path):
    coils = gen_coil_maps(24, 20, 4, seed=1)
    physim.save_coil_maps(tmp_path / "s.pisf", coils)
    back = physim.load_coil_maps(tmp_path / "s.pisf")
    assert back.origin == "loaded"
    assert np.array_equal(back.maps, coils.maps.astype(np.complex64))


def test_coil_map_loader_rejects_2d(tmp_path):
    from pisf.arrayio import write_array

    write_array(tmp_path / "s.pisf", np.ones((4, 4), np.complex64))
    with pytest.raises(ValueError, match="shape|c x h x w"):
        physim.load_coil_maps(tmp_path / "s.pisf")


def test_rough_maps_load_with_warning(tmp_path):
    from pisf.arrayio import write_array

    rough = np.random.default_rng(0).standard_normal((2, 16, 16)).astype(np.complex64)
    write_array(tmp_path / "s.pisf", rough)
    with pytest.warns(UserWarning, match="smooth"):
        back = physim.load_coil_maps(tmp_path / "s.pisf")
    assert back.maps.shape == (2, 16, 16)


def test_compose_scene_cases():
    rng = np.random.default_rng(0)
    A = rng.uniform(size=(8, 6))
    P = gen_phase_map(8, 6, 2, 1)
    S = gen_coil_maps(8, 6, 3, seed=2)
    assert not compose_scene(np.zeros((8, 6)), P, S).X.any()
    X1 = compose_scene(A, np.ones((8, 6)), np.ones((1, 8, 6))).X
    assert np.array_equal(X1[0], A)
    X = compose_scene(A, P, S).X
    assert np.allclose(np.abs(X), A * np.abs(S.maps), atol=1e-6)
    with pytest.raises(ValueError):
        compose_scene(A, np.ones((7, 6)), S)


def test_rows_partition_the_image():
    X = np.random.default_rng(1).standard_normal((3, 5, 4)) + 0j
    assert np.array_equal(extract_row(X, 0), X[:, 0])
    v = X[:, 2]
    assert np.array_equal(extract_row(embed_row(v, 2, 5), 2), v)
    assert np.array_equal(sum(embed_row(extract_row(X, m), m, 5) for m in range(5)), X)
    with pytest.raises(IndexError):
        extract_row(X, 5)


def test_full_mask_noiseless_roundtrip():
    x = np.random.default_rng(2).standard_normal((2, 32)) + 1j * np.random.default_rng(3).standard_normal((2, 32))
    y = forward_1d(x, np.ones(32, bool))
    assert np.allclose(ifft1c(y), x, atol=1e-6)


def test_unsampled_positions_exactly_zero():
    m = make_cartesian_1d(64, 4, 8, seed=1)
    y = forward_1d(np.ones((3, 64), complex), m, snr_db=10, seed=5)
    assert np.all(y[:, ~m.sampled] == 0)


def test_monte_carlo_snr():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(320) + 1j * rng.standard_normal(320)
    k = fft1c(x)
    full = np.ones(320, bool)
    noise = np.array([forward_1d(x, full, 20.0, seed=s) - k for s in range(1000)])
    snr = 10 * np.log10(np.mean(np.abs(k) ** 2) / np.mean(np.abs(noise) ** 2))
    assert abs(snr - 20.0) <= 0.5
    assert abs(np.var(noise.real) - np.var(noise.imag)) < 0.05 * np.var(noise.real)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(3, 200), seed=st.integers(0, 10**6))
def test_adjoint_and_parseval(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    v = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    mask = rng.uniform(size=n) < 0.5
    lhs = np.vdot(v, forward_linear_1d(x, mask))
    rhs = np.vdot(adjoint_1d(v, mask), x)
    assert abs(lhs - rhs) <= 1e-5 * np.linalg.norm(x) * np.linalg.norm(v)
    assert abs(np.linalg.norm(fft1c(x)) - np.linalg.norm(x)) <= 1e-6 * np.linalg.norm(x)


# ------------------------------------------------------------------ datasets


def _cfg(**kw):
    base = dict(sample_count=40, signal_length=64, af=4, acs_width=6, n_magnitudes=6, n_coil_sets=2, ncoils=4,
                magnitude_kinds=("procedural-blobs", "shepp-logan"), master_seed=17)
    base.update(kw)
    return SynthConfig(**base)


def test_dataset_split_and_masks(tmp_path):
    m = build_dataset(_cfg(), tmp_path)
    assert (m.n_train, m.n_val) == (36, 4)
    back = load_manifest(tmp_path)
    for e in back.entries:
        mask = read_array(back.resolve(e.mask_path)).astype(bool)
        y = read_array(back.resolve(e.y_path))
        assert achieved_af(mask) == 64 / 16
        assert np.all(y[~mask] == 0)
        assert 10 <= e.snr_db <= 80


def test_dataset_count_1000_split():
    from pisf.arrayio import DatasetManifest

    m = DatasetManifest(0, 1000, 4.0, 24, [10, 80], entries=[None] * 1000)
    assert (m.n_train, m.n_val) == (900, 100)


def test_dataset_regeneration_is_byte_identical(tmp_path):
    build_dataset(_cfg(), tmp_path / "a")
    build_dataset(_cfg(jobs=3), tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        if f.name == "synth_config.json":
            continue
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_sample_independent_of_generation_order():
    cfg = _cfg()
    pools = physim._Pools(cfg)
    a = physim.make_sample(cfg, pools, 7)
    for i in range(7):
        physim.make_sample(cfg, pools, i)
    b = physim.make_sample(cfg, pools, 7)
    assert np.array_equal(a.y, b.y) and np.array_equal(a.x_ref, b.x_ref)


def test_label_is_clean_row_and_input_matches_forward_model():
    cfg = _cfg(snr_range_db=(300.0, 300.0))
    pools = physim._Pools(cfg)
    s = physim.make_sample(cfg, pools, 3)
    assert np.allclose(s.y, np.where(s.mask.sampled, fft1c(s.x_ref), 0), atol=1e-5)


def test_masks_differ_between_samples():
    cfg = _cfg(signal_length=320, acs_width=24, n_magnitudes=2, sample_count=30)
    pools = physim._Pools(cfg)
    masks = [physim.make_sample(cfg, pools, i).mask.sampled for i in range(30)]
    lo, hi = acs_bounds(320, 24)
    outside = np.r_[0:lo, hi:320]
    pairs = [(i, j) for i in range(30) for j in range(i + 1, 30)]
    distinct = sum(not np.array_equal(masks[i][outside], masks[j][outside]) for i, j in pairs)
    assert distinct >= 0.95 * len(pairs)


def test_unknown_synth_key_rejected():
    with pytest.raises(ValueError, match="bogus"):
        SynthConfig.from_dict({"bogus": 1})


def test_intensity_stats_matches_recount(tmp_path):
    m = build_dataset(_cfg(sample_count=12), tmp_path)
    stats = intensity_stats(m, bins=7)
    counts = np.zeros(7, int)
    for e in m.entries:
        v = np.abs(read_array(m.resolve(e.xref_path))).astype(np.float64)
        v /= v.max()
        for val in v:
            counts[min(int(val * 7), 6)] += 1
    assert stats["counts"] == counts.tolist()
    assert sum(stats["counts"]) == stats["total"] == 12 * 64
    assert stats["max"] == pytest.approx(1.0)


def test_intensity_stats_constant_magnitude(tmp_path):
    from pisf.arrayio import DatasetManifest, ManifestEntry, write_array

    for i in range(3):
        write_array(tmp_path / f"{i}.pisf", np.full(8, 2 * np.exp(1j * i), np.complex64))
    entries = [ManifestEntry(i, f"{i}.pisf", f"{i}.pisf", f"{i}.pisf", 20.0, i) for i in range(3)]
    m = DatasetManifest(0, 3, 1.0, 0, [10, 80], entries, signal_length=8, root=tmp_path)
    stats = intensity_stats(m, bins=5)
    assert sum(c > 0 for c in stats["counts"]) == 1


def test_intensity_stats_needs_two_bins(tmp_path):
    m = build_dataset(_cfg(sample_count=2), tmp_path)
    with pytest.raises(ValueError):
        intensity_stats(m, bins=1)


def test_no_warnings_for_simulated_scene():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        physim.simulate_scene("shepp-logan", 32, 4, seed=0)
