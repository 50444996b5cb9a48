import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ehrgan import bvae
from ehrgan import gradcore as gc
from ehrgan.bvae import (
    BvaeConfig,
    BvaeDiverged,
    BvaeModel,
    VarianceProfile,
    efficient_dims,
    elbo_loss,
    kl_divergence,
    lsr_compare,
    reconstruction_loss,
    shuffle_columns,
    toy_factor_data,
    train_bvae,
    variance_profile,
)
from ehrgan.cohort import SimConfig, simulate_cohort

from conftest import central_fd, rel_err

TOY = BvaeConfig(hidden=(64, 32), latent_dim=8, beta_kl=4.0, epochs=30, batch_size=100, likelihood="gaussian", recon_scale=0.1, lr=2e-3)


@pytest.fixture(scope="module")
def toy():
    x = toy_factor_data(2000, seed=0)
    return x, train_bvae(x, TOY, seed=0)


# ---------------------------------------------------------------------------
# loss pieces


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5)), arrays(np.float64, (3, 4), elements=st.floats(-8, 3)))
def test_kl_is_non_negative(mu, logvar):
    kl = kl_divergence(gc.Tensor(mu), gc.Tensor(logvar)).value
    assert np.all(kl >= -1e-12)


def test_kl_zero_at_prior_and_closed_form():
    assert np.all(kl_divergence(gc.Tensor(np.zeros((2, 3))), gc.Tensor(np.zeros((2, 3)))).value == 0)
    mu, lv = np.array([[1.0, -2.0]]), np.array([[np.log(2.0), 0.0]])
    expect = 0.5 * ((2 + 1 - np.log(2) - 1) + (1 + 4 - 0 - 1))
    assert kl_divergence(gc.Tensor(mu), gc.Tensor(lv)).value[0] == pytest.approx(expect)


def test_reconstruction_losses():
    out = np.array([[0.0, 2.0]])
    x = np.array([[1.0, 0.0]])
    bern = reconstruction_loss(gc.Tensor(out), x, "bernoulli").value[0]
    assert bern == pytest.approx(np.log(2) + np.log1p(np.exp(2.0)))
    gauss = reconstruction_loss(gc.Tensor(out), x, "gaussian", scale=0.5).value[0]
    assert gauss == pytest.approx(0.5 * (1 + 4) / 0.25)


def test_elbo_parameter_gradient_matches_fd():
    cfg = BvaeConfig(hidden=(6,), latent_dim=3, likelihood="bernoulli")
    model = BvaeModel.init(cfg, 5, seed=1)
    x = (np.random.default_rng(0).random((7, 5)) < 0.4).astype(float)
    params = model.parameters()
    with gc.Tape() as tape:
        loss, _ = elbo_loss(model, x, np.random.default_rng(2))
        grads = tape.gradient(loss, params)
    a, n = [], []
    for p, g in zip(params, grads):
        fd = central_fd(lambda: float(elbo_loss(model, x, np.random.default_rng(2))[0].value), p.value)
        a.append(g.value.ravel())
        n.append(fd.ravel())
    assert rel_err(np.concatenate(a), np.concatenate(n)) < 1e-5


def test_config_validation():
    with pytest.raises(ValueError):
        BvaeConfig(latent_dim=0)
    with pytest.raises(ValueError):
        BvaeConfig(likelihood="poisson")
    with pytest.raises(ValueError):
        BvaeConfig(beta_kl=-1)
    assert BvaeConfig.from_dict(TOY.to_dict()) == TOY


# ---------------------------------------------------------------------------
# training


def test_autoencoding_limit_on_linear_data():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2000, 2)) @ rng.standard_normal((2, 10))
    cfg = BvaeConfig(hidden=(64, 32), latent_dim=4, beta_kl=0.0, epochs=60, batch_size=100, likelihood="gaussian", lr=2e-3)
    model = train_bvae(x, cfg, seed=0)
    mu, _ = model.encode(x)
    mse = np.mean((model.decode(mu.value).value - x) ** 2)
    assert mse / x.var() < 1e-3


def test_training_is_deterministic():
    x = toy_factor_data(300, seed=1)
    cfg = BvaeConfig(hidden=(16,), latent_dim=3, epochs=3, batch_size=50, likelihood="gaussian")
    a, b = train_bvae(x, cfg, 5), train_bvae(x, cfg, 5)
    assert all(np.array_equal(p.value, q.value) for p, q in zip(a.parameters(), b.parameters()))
    assert a.history == b.history
    assert np.array_equal(variance_profile(a, x).variances, variance_profile(b, x).variances)


def test_divergence_aborts(monkeypatch):
    monkeypatch.setattr(bvae, "DIVERGENCE_LIMIT", 0.0)
    with pytest.raises(BvaeDiverged):
        train_bvae(toy_factor_data(50), BvaeConfig(hidden=(4,), latent_dim=2, epochs=1, likelihood="gaussian"), 0)
    with pytest.raises(ValueError):
        train_bvae(np.zeros((0, 3)), BvaeConfig(hidden=(4,), latent_dim=2), 0)


def test_trains_on_a_cohort():
    cohort, _ = simulate_cohort(SimConfig(n_records=200, n_icd=6, n_cpt=2), 0)
    model = train_bvae(cohort, BvaeConfig(hidden=(8,), latent_dim=3, epochs=2, batch_size=50), 0)
    assert model.scaler is not None and model.width == cohort.schema.width
    v = bvae.posterior_variances(model, cohort)
    assert v.shape == (200, 3) and np.all(v > 0)


# ---------------------------------------------------------------------------
# variance profiles


def test_two_factor_toy_keeps_two_dims_and_lets_the_rest_go(toy):
    x, model = toy
    prof = variance_profile(model, x)
    dims = efficient_dims(prof)
    assert len(dims) == 2
    assert np.all(prof.means[dims] < 0.70)
    unused = np.setdiff1d(np.arange(TOY.latent_dim), dims)
    assert np.all(prof.means[unused] > 0.85)


def test_noise_training_cohort_collapses_to_prior():
    x = np.random.default_rng(0).standard_normal((2000, 10))
    cfg = BvaeConfig(hidden=(64, 32), latent_dim=8, beta_kl=4.0, epochs=30, batch_size=100, likelihood="gaussian", lr=2e-3)
    means = variance_profile(train_bvae(x, cfg, 0), x).means
    assert np.all(np.abs(means - 1.0) < 0.05)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (5, 6), elements=st.floats(0.0, 2.0)), st.floats(0.0, 1.5), st.floats(0.0, 1.0))
def test_efficient_dim_selection_is_monotone(v, t, extra):
    prof = VarianceProfile(v)
    assert set(efficient_dims(prof, t)) <= set(efficient_dims(prof, t + extra))


def test_profile_histograms(toy):
    x, model = toy
    doc = variance_profile(model, x[:100], bins=5).to_dict()
    assert doc["n"] == 100 and len(doc["histograms"]) == TOY.latent_dim
    assert all(sum(h["counts"]) == 100 for h in doc["histograms"])


# ---------------------------------------------------------------------------
# LSR


def test_lsr_identical_has_zero_shift(toy):
    x, model = toy
    r = lsr_compare(model, x, x.copy())
    assert r.dims and all(s == 0.0 for s in r.shifts)


def test_lsr_shift_is_synth_minus_real(toy):
    x, model = toy
    r = lsr_compare(model, x, shuffle_columns(x, 100))
    assert r.shifts == [s - q for q, s in zip(r.real_means, r.synth_means)]
    doc = r.to_dict()
    assert doc["shift"] == r.shifts and len(doc["real_histograms"]) == len(r.dims)


def test_lsr_without_efficient_dims_is_empty(toy):
    x, model = toy
    r = lsr_compare(model, x, x, threshold=0.0)
    assert r.dims == [] and r.shifts == [] and r.to_dict()["dims"] == []


def test_shuffle_keeps_marginals():
    x = toy_factor_data(100, seed=3)
    s = shuffle_columns(x, 0)
    assert np.array_equal(np.sort(s, axis=0), np.sort(x, axis=0))
    assert not np.array_equal(s, x)
