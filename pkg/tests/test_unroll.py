import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from pisf import unroll
from pisf.fourier import fft1c
from pisf.sampling import make_cartesian_1d
from pisf.unroll import (
    DealiasInference,
    DealiasModule,
    TrainConfig,
    TrainingError,
    UnrolledDealiaser,
    UnrolledModel,
    channels_to_complex,
    complex_to_channels,
    data_consistency_1d,
    data_consistency_1d_backward,
    forward_unrolled,
    train_arrays,
    training_loss,
)


def _dft_matrix(n):
    c = n // 2
    idx = np.arange(n) - c
    return np.exp(-2j * np.pi * np.outer(idx, idx) / n) / np.sqrt(n)


def _toy_data(count, n=32, af=4, acs=4, seed=0):
    rng = np.random.default_rng(seed)
    t = np.linspace(-1, 1, n)
    x = np.array([(rng.uniform(0.3, 1) * (np.abs(t - rng.uniform(-0.5, 0.5)) < rng.uniform(0.1, 0.4)))
                  * np.exp(1j * rng.uniform(-1, 1)) for _ in range(count)]).astype(np.complex64)
    m = np.array([make_cartesian_1d(n, af, acs, seed=seed * 1000 + i).sampled for i in range(count)])
    y = np.where(m, fft1c(x), 0).astype(np.complex64)
    return y, m, x


def test_dft_oracle_matches_centered_transform():
    for n in (8, 9):
        v = np.random.default_rng(n).standard_normal(n) + 1j
        assert np.allclose(_dft_matrix(n) @ v, fft1c(v))


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 64), b=st.integers(1, 4), seed=st.integers(0, 2**32))
def test_channel_packing_roundtrip(n, b, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((b, n)) + 1j * rng.standard_normal((b, n))
    t = complex_to_channels(x)
    assert t.shape == (b, n, 2)
    assert np.array_equal(channels_to_complex(t), x)


@pytest.mark.parametrize("lam", [0.0, 0.3, 1.0, 7.5])
def test_dc_matches_dense_least_squares(lam):
    n = 16
    rng = np.random.default_rng(1)
    mask = rng.uniform(size=n) < 0.4
    mask[n // 2] = True
    d = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    x_true = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    F = _dft_matrix(n)
    U = np.eye(n)[mask]
    y_s = U @ F @ x_true
    y = np.zeros(n, complex)
    y[mask] = y_s
    got = data_consistency_1d(d, y, mask, lam)
    if lam == 0:
        # the minimizer is not unique; check the sampled constraint and that d fills the rest
        assert np.allclose(fft1c(got)[mask], y_s, atol=1e-10)
        assert np.allclose(fft1c(got)[~mask], fft1c(d)[~mask], atol=1e-10)
        return
    A = np.vstack([U @ F, np.sqrt(lam) * np.eye(n)])
    rhs = np.concatenate([y_s, np.sqrt(lam) * d])
    oracle = np.linalg.lstsq(A, rhs, rcond=None)[0]
    assert np.linalg.norm(got - oracle) <= 1e-5 * np.linalg.norm(oracle)


def test_dc_empty_mask_returns_d():
    d = np.random.default_rng(2).standard_normal(8) + 0j
    assert np.allclose(data_consistency_1d(d, np.zeros(8, complex), np.zeros(8, bool), 1.0), d)


def test_dc_large_lambda_returns_d():
    rng = np.random.default_rng(3)
    d = rng.standard_normal(8) + 0j
    y = np.where(np.arange(8) % 2 == 0, rng.standard_normal(8), 0)
    assert np.allclose(data_consistency_1d(d, y, np.arange(8) % 2 == 0, 1e9), d, atol=1e-7)


def test_dc_rejects_negative_lambda_and_bad_length():
    with pytest.raises(ValueError):
        data_consistency_1d(np.zeros(4, complex), np.zeros(4, complex), np.ones(4, bool), -1.0)
    with pytest.raises(ValueError):
        data_consistency_1d(np.zeros(4, complex), np.zeros(4, complex), np.ones(5, bool), 1.0)


def test_dc_backward_matches_finite_differences():
    n = 12
    rng = np.random.default_rng(4)
    mask = rng.uniform(size=n) < 0.5
    d = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    y = np.where(mask, rng.standard_normal(n) + 1j * rng.standard_normal(n), 0)
    w = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    lam = 0.7

    def loss(dd, ll):
        x = data_consistency_1d(dd, y, mask, ll)
        return float(np.sum(w.real * x.real + w.imag * x.imag))

    gd, glam = data_consistency_1d_backward(w, d, y, mask, lam)
    h = 1e-6
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        num_re = (loss(d + e, lam) - loss(d - e, lam)) / (2 * h)
        num_im = (loss(d + 1j * e, lam) - loss(d - 1j * e, lam)) / (2 * h)
        assert num_re == pytest.approx(gd[i].real, rel=1e-6, abs=1e-9)
        assert num_im == pytest.approx(gd[i].imag, rel=1e-6, abs=1e-9)
    assert (loss(d, lam + h) - loss(d, lam - h)) / (2 * h) == pytest.approx(glam, rel=1e-6)


def test_training_loss_examples():
    x_ref = np.zeros((2, 3), complex)
    outs = [np.ones((2, 3), complex), np.zeros((2, 3), complex)]
    # (6 + 0) / (K=2 * T=2)
    assert training_loss(outs, x_ref) == pytest.approx(1.5)
    assert training_loss([x_ref], x_ref) == 0.0
    with pytest.raises(ValueError):
        training_loss([], x_ref)
    with pytest.raises(ValueError):
        training_loss([np.zeros((2, 4))], x_ref)


def test_dealias_module_is_length_agnostic():
    mod = DealiasModule("advanced", rng=np.random.default_rng(0))
    for n in (16, 64, 128):
        x = np.random.default_rng(n).standard_normal((2, n)) + 0j
        out, _ = unroll.dealias_1d(x.astype(np.complex64), mod)
        assert out.shape == (2, n)


def test_plain_variant_has_no_threshold():
    assert "threshold" not in DealiasModule("plain").children
    assert "threshold" in DealiasModule("advanced").children
    with pytest.raises(ValueError):
        DealiasModule("fancy")


def test_inference_path_matches_module_forward():
    model = UnrolledModel.create(K=1, seed=3)
    mod = model.module(0)
    rng = np.random.default_rng(5)
    for m in mod.modules():
        if "running_var" in m.buffers:
            m.buffers["running_var"][:] = rng.uniform(0.5, 2, m.buffers["running_var"].shape)
            m.buffers["running_mean"][:] = rng.standard_normal(m.buffers["running_mean"].shape) * 0.1
            m.params["gamma"][:] = rng.uniform(0.5, 1.5, m.params["gamma"].shape)
    x = (rng.standard_normal((3, 40)) + 1j * rng.standard_normal((3, 40))).astype(np.complex64)
    ref, _ = unroll.dealias_1d(x, mod)
    fast = DealiasInference(mod).dealias(x)
    assert np.max(np.abs(fast - ref)) <= 1e-5 * max(np.max(np.abs(ref)), 1.0)
    ref_b, _ = unroll.dealias_1d(x, mod, bypass_threshold=True)
    assert np.allclose(DealiasInference(mod).dealias(x, bypass_threshold=True), ref_b, atol=1e-5)


def test_unrolled_gradients_match_finite_differences():
    y, m, x = _toy_data(3, n=16)
    model = UnrolledModel.create(K=2, seed=1, dtype=np.float64)
    y, x = y.astype(np.complex128), x.astype(np.complex128)
    model.lam[:] = [0.8, 1.3]

    def loss():
        outs, _ = model.forward(y, m, train=True, update_stats=False)
        return training_loss(outs, x)

    model.zero_grad()
    outs, cache = model.forward(y, m, train=True, keep_cache=True, update_stats=False)
    model.backward(unroll._loss_grads(outs, x), cache)
    grads = {k: v.copy() for k, v in model.named_grads().items()}
    params = model.named_parameters()
    rng = np.random.default_rng(0)
    h, worst = 1e-6, 0.0
    for name in ("lambda", "dealias.conv_in.weight", "dealias.conv_out.bias", "dealias.res3.conv1.weight"):
        flat, g = params[name].reshape(-1), grads[name].reshape(-1)
        for i in rng.choice(flat.size, size=min(4, flat.size), replace=False):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss()
            flat[i] = orig - h
            lm = loss()
            flat[i] = orig
            num = (lp - lm) / (2 * h)
            worst = max(worst, abs(num - g[i]) / max(abs(num), abs(g[i]), 1e-8))
    assert worst <= 1e-5


def test_save_load_is_bit_identical(tmp_path):
    model = UnrolledModel.create(K=3, shared=False, seed=2)
    model.lam[:] = [0.5, 1.0, 2.0]
    model.save(tmp_path / "a")
    back = UnrolledModel.load(tmp_path / "a")
    assert back.K == 3 and not back.shared
    for k, v in model.state_dict().items():
        assert back.state_dict()[k].tobytes() == v.tobytes(), k
    back.save(tmp_path / "b")
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes(), f.name


def test_shared_model_has_one_parameter_set():
    shared = UnrolledModel.create(K=4, shared=True)
    per = UnrolledModel.create(K=4, shared=False)
    n_shared = sum(v.size for v in shared.named_parameters().values())
    n_per = sum(v.size for v in per.named_parameters().values())
    assert n_per - 4 == 4 * (n_shared - 4)


def test_lambda_projection_keeps_nonnegative():
    model = UnrolledModel.create(K=2)
    model.lam[:] = [-0.5, 0.2]
    model.project()
    assert model.lam.tolist() == [0.0, pytest.approx(0.2)]


def test_training_is_deterministic_and_writes_checkpoints(tmp_path):
    data = _toy_data(12)
    val = _toy_data(4, seed=9)
    cfg = TrainConfig(epochs=2, batch_size=4, K=2, seed=3)
    m1, h1 = train_arrays(data, val, cfg, tmp_path / "a")
    m2, h2 = train_arrays(data, val, cfg, tmp_path / "b")
    assert [r["train_loss"] for r in h1] == [r["train_loss"] for r in h2]
    for f in (tmp_path / "a" / "epoch_002").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / "epoch_002" / f.name).read_bytes()
    assert (tmp_path / "a" / "best" / "manifest.json").exists()
    lines = (tmp_path / "a" / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 2


def test_nonfinite_loss_aborts_and_keeps_last_checkpoint(tmp_path, monkeypatch):
    data = _toy_data(4)
    calls = {"n": 0}
    real = unroll.training_loss

    def flaky(outs, x_ref):
        calls["n"] += 1
        return float("nan") if calls["n"] > 3 else real(outs, x_ref)

    monkeypatch.setattr(unroll, "training_loss", flaky)
    cfg = TrainConfig(epochs=3, batch_size=2, K=1)
    with pytest.raises(TrainingError):
        train_arrays(data, _toy_data(2, seed=5), cfg, tmp_path)
    assert (tmp_path / "epoch_001" / "manifest.json").exists()
    assert not (tmp_path / "epoch_002").exists()


def test_train_config_rejects_unknown_and_invalid():
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"epoch": 3})
    with pytest.raises(ValueError):
        TrainConfig(K=0).validate()


def test_forward_unrolled_single_signal():
    y, m, _ = _toy_data(1)
    model = UnrolledModel.create(K=2)
    outs = forward_unrolled(y[0], m[0], model)
    assert len(outs) == 2 and outs[-1].shape == (32,)


def test_estimator_params_and_clone():
    est = UnrolledDealiaser(K=3, epochs=1)
    assert est.get_params()["K"] == 3
    assert clone(est).get_params() == est.get_params()


def test_estimator_fit_predict_and_reload(tmp_path):
    y, m, x = _toy_data(8)
    est = UnrolledDealiaser(K=2, epochs=1, batch_size=4, checkpoint_dir=str(tmp_path)).fit((y, m), x)
    pred = est.predict(y, m)
    assert pred.shape == y.shape
    assert len(est.predict(y, m, all_phases=True)) == 2
    assert np.isfinite(est.score((y, m), x))
    back = UnrolledDealiaser.from_checkpoint(tmp_path / "epoch_001")
    assert np.allclose(back.predict(y, m), pred)


def test_channel_packing_real_input_and_norm():
    x = np.array([[1.0, -2.0, 3.0]]) + 0j
    t = complex_to_channels(x)
    assert not t[..., 1].any()
    z = np.random.default_rng(0).standard_normal((2, 5)) + 1j
    assert np.linalg.norm(complex_to_channels(z)) == pytest.approx(np.linalg.norm(z))


def test_zero_input_zero_bias_gives_zero_output():
    mod = DealiasModule("advanced", rng=np.random.default_rng(3), dtype=np.float64)
    out, _ = mod.forward(np.zeros((2, 9, 2)))
    assert not out.any()


def test_dealias_lengths_from_contract():
    mod = DealiasModule("plain", rng=np.random.default_rng(0))
    for n in (17, 64, 320, 384):
        out, _ = unroll.dealias_1d(np.ones((1, n), np.complex64), mod)
        assert out.shape == (1, n)


def test_single_phase_zero_lambda_full_mask_is_inverse_ft():
    rng = np.random.default_rng(4)
    x = (rng.standard_normal((2, 24)) + 1j * rng.standard_normal((2, 24))).astype(np.complex64)
    y = fft1c(x)
    model = UnrolledModel.create(K=1)
    model.lam[:] = 0
    outs = forward_unrolled(y, np.ones(24, bool), model)
    assert len(outs) == 1
    assert np.allclose(outs[0], x, atol=1e-5)
    assert len(forward_unrolled(y, np.ones(24, bool), UnrolledModel.create(K=4))) == 4


def test_huge_lambda_returns_network_output():
    y, m, _ = _toy_data(2)
    model = UnrolledModel.create(K=3, dtype=np.float64)
    model.lam[:] = 1e6
    outs, cache = model.forward(y.astype(np.complex128), m, keep_cache=True)
    d_last = cache["phases"][-1][1] * cache["scale"]
    assert np.linalg.norm(outs[-1] - d_last) <= 1e-4 * np.linalg.norm(d_last)


def test_loss_arithmetic_and_brute_force():
    assert training_loss([np.array([[1.0, 1j]])], np.zeros((1, 2), complex)) == pytest.approx(2.0)
    rng = np.random.default_rng(5)
    ref = rng.standard_normal((3, 4)) + 1j * rng.standard_normal((3, 4))
    outs = [rng.standard_normal((3, 4)) + 0j for _ in range(2)]
    brute = sum(abs(ref[t, i] - o[t, i]) ** 2 for o in outs for t in range(3) for i in range(4)) / (2 * 3)
    assert training_loss(outs, ref) == pytest.approx(brute)


def test_reloaded_model_outputs_are_bit_identical(tmp_path):
    y, m, x = _toy_data(6)
    model, _ = train_arrays((y, m, x), None, TrainConfig(epochs=1, batch_size=3, K=2))
    before = forward_unrolled(y, m, model)
    model.save(tmp_path)
    after = forward_unrolled(y, m, UnrolledModel.load(tmp_path))
    assert all(a.tobytes() == b.tobytes() for a, b in zip(before, after))
