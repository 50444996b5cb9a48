"""β-VAE for latent-structure comparison of real and synthetic cohorts.

The encoder maps a record to a diagonal Gaussian posterior.  With a large KL
weight, latent dimensions the data does not need collapse to the prior and
their posterior variance sits near 1; the remaining "efficient" dimensions
carry the structure.  Feeding records that lack that structure pushes the
efficient dimensions' variances back toward 1.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import gradcore as gc
from .schema import Cohort, Scaler, encode_cohort

LSR_THRESHOLD = 0.70
LIKELIHOODS = ("bernoulli", "gaussian")
DIVERGENCE_LIMIT = 1e8


@dataclass
class BvaeConfig:
    hidden: tuple[int, ...] = (256, 64)
    latent_dim: int = 32
    beta_kl: float = 4.0
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 128
    likelihood: str = "bernoulli"
    recon_scale: float = 1.0
    dtype: str = "float64"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.latent_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError("latent and hidden widths must be positive")
        if self.beta_kl < 0:
            raise ValueError("beta_kl must be non-negative")
        if self.likelihood not in LIKELIHOODS:
            raise ValueError(f"likelihood must be one of {LIKELIHOODS}")
        if self.recon_scale <= 0:
            raise ValueError("recon_scale must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BvaeConfig":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class BvaeModel:
    config: BvaeConfig
    encoder: list[gc.Dense]
    decoder: list[gc.Dense]
    scaler: Scaler | None = None
    history: list = field(default_factory=list)

    @classmethod
    def init(cls, config: BvaeConfig, width: int, seed: int, scaler: Scaler | None = None) -> "BvaeModel":
        rng = np.random.default_rng([seed, 10])
        enc_w = (width,) + config.hidden + (2 * config.latent_dim,)
        dec_w = (config.latent_dim,) + tuple(reversed(config.hidden)) + (width,)
        with gc.precision(config.dtype):
            enc = [gc.Dense.init(a, b, rng, name=f"enc{i}") for i, (a, b) in enumerate(zip(enc_w[:-1], enc_w[1:]))]
            dec = [gc.Dense.init(a, b, rng, name=f"dec{i}") for i, (a, b) in enumerate(zip(dec_w[:-1], dec_w[1:]))]
        return cls(config, enc, dec, scaler)

    @property
    def width(self) -> int:
        return self.encoder[0].n_in

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    def parameters(self) -> list[gc.Tensor]:
        return gc.parameters_of(*self.encoder, *self.decoder)

    def encode(self, x) -> tuple[gc.Tensor, gc.Tensor]:
        """Posterior mean and log-variance."""
        h = _mlp(self.encoder, x)
        k = self.latent_dim
        return h[:, :k], h[:, k:]

    def decode(self, z) -> gc.Tensor:
        """Decoder output before the likelihood link (logits or means)."""
        return _mlp(self.decoder, z)


def _mlp(layers: list[gc.Dense], x) -> gc.Tensor:
    h = gc.as_tensor(x)
    for i, layer in enumerate(layers):
        h = gc.forward_dense(layer, h)
        if i < len(layers) - 1:
            h = gc.relu(h)
    return h


def kl_divergence(mu, logvar) -> gc.Tensor:
    """Per-row KL(N(mu, exp(logvar)) || N(0, I))."""
    terms = gc.sub(gc.add(gc.exp(logvar), gc.square(mu)), gc.add(logvar, 1.0))
    return gc.mul(gc.reduce_sum(terms, axis=1), 0.5)


def reconstruction_loss(out, x, likelihood: str, scale: float = 1.0) -> gc.Tensor:
    """Per-row negative log-likelihood, up to a constant."""
    x = gc.as_tensor(x)
    if likelihood == "bernoulli":
        nll = gc.sub(gc.softplus(out), gc.mul(x, out))
    else:
        nll = gc.mul(gc.square(gc.sub(out, x)), 0.5 / scale**2)
    return gc.reduce_sum(nll, axis=1)


def elbo_loss(model: BvaeModel, x, rng: np.random.Generator) -> tuple[gc.Tensor, dict]:
    """Mean over rows of reconstruction + beta_kl * KL, with one reparameterized draw."""
    cfg = model.config
    mu, logvar = model.encode(x)
    eps = rng.standard_normal(mu.shape)
    z = gc.add(mu, gc.mul(gc.exp(gc.mul(logvar, 0.5)), eps))
    rec = gc.mean(reconstruction_loss(model.decode(z), x, cfg.likelihood, cfg.recon_scale))
    kl = gc.mean(kl_divergence(mu, logvar))
    loss = gc.add(rec, gc.mul(kl, cfg.beta_kl))
    return loss, {"reconstruction": float(rec.value), "kl": float(kl.value)}


class BvaeDiverged(RuntimeError):
    pass


def features(data, scaler: Scaler | None = None) -> np.ndarray:
    """Model inputs: a cohort is encoded (codes, scaled vitals); arrays pass through."""
    if isinstance(data, Cohort):
        if scaler is None:
            raise ValueError("encoding a cohort needs a scaler")
        return encode_cohort(data, scaler)[0]
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("features must be a 2-D array")
    return x


def train_bvae(data, config: BvaeConfig, seed: int) -> BvaeModel:
    """Minimize the β-ELBO with Adam over shuffled mini-batches."""
    scaler = Scaler.fit(data.vitals) if isinstance(data, Cohort) else None
    x = features(data, scaler)
    if len(x) == 0:
        raise ValueError("training needs a non-empty cohort")
    model = BvaeModel.init(config, x.shape[1], seed, scaler)
    rng = np.random.default_rng([seed, 11])
    params = model.parameters()
    opt = gc.AdamState(lr=config.lr)
    bs = min(config.batch_size, len(x))
    with gc.precision(config.dtype):
        for epoch in range(config.epochs):
            perm = rng.permutation(len(x))
            total = rec = kl = 0.0
            steps = 0
            for start in range(0, len(x), bs):
                xb = x[perm[start : start + bs]]
                with gc.Tape() as tape:
                    loss, parts = elbo_loss(model, xb, rng)
                    v = float(loss.value)
                    if not math.isfinite(v) or abs(v) > DIVERGENCE_LIMIT:
                        raise BvaeDiverged(f"loss {v!r} at epoch {epoch}")
                    grads = tape.gradient(loss, params)
                tape.release()
                gc.adam_step(params, grads, opt)
                total += v
                rec += parts["reconstruction"]
                kl += parts["kl"]
                steps += 1
            model.history.append({"epoch": epoch, "loss": total / steps, "reconstruction": rec / steps, "kl": kl / steps})
    return model


def posterior_variances(model: BvaeModel, data, chunk: int = 4096) -> np.ndarray:
    """Encoder variance per record and latent dimension."""
    x = features(data, model.scaler)
    out = np.empty((len(x), model.latent_dim))
    with gc.no_grad(), gc.precision(model.config.dtype):
        for s in range(0, len(x), chunk):
            out[s : s + chunk] = np.exp(model.encode(x[s : s + chunk])[1].value)
    return out


@dataclass
class VarianceProfile:
    variances: np.ndarray
    bins: int = 20

    @property
    def means(self) -> np.ndarray:
        return self.variances.mean(axis=0) if len(self.variances) else np.full(self.variances.shape[1], np.nan)

    def histogram(self, dim: int, hi: float | None = None) -> dict:
        v = self.variances[:, dim]
        top = max(1.0, float(v.max()) if len(v) else 1.0) if hi is None else hi
        counts, edges = np.histogram(v, bins=self.bins, range=(0.0, top))
        return {"edges": edges.tolist(), "counts": counts.tolist()}

    def to_dict(self) -> dict:
        return {
            "n": int(len(self.variances)),
            "means": self.means.tolist(),
            "histograms": [self.histogram(j) for j in range(self.variances.shape[1])],
        }


def variance_profile(model: BvaeModel, data, bins: int = 20) -> VarianceProfile:
    return VarianceProfile(posterior_variances(model, data), bins)


def efficient_dims(profile: VarianceProfile, threshold: float = LSR_THRESHOLD) -> list[int]:
    """Dimensions whose mean posterior variance is below ``threshold``."""
    return [int(j) for j in np.flatnonzero(profile.means < threshold)]


@dataclass
class LsrResult:
    dims: list[int]
    real_means: list[float]
    synth_means: list[float]
    real_histograms: list[dict]
    synth_histograms: list[dict]
    threshold: float

    @property
    def shifts(self) -> list[float]:
        return [s - r for r, s in zip(self.real_means, self.synth_means)]

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "dims": self.dims,
            "real_mean": self.real_means,
            "synth_mean": self.synth_means,
            "shift": self.shifts,
            "real_histograms": self.real_histograms,
            "synth_histograms": self.synth_histograms,
        }


def lsr_compare(model: BvaeModel, real, synth, threshold: float = LSR_THRESHOLD, bins: int = 20) -> LsrResult:
    """Efficient dims are chosen on ``real``; both profiles are reported on them."""
    pr = variance_profile(model, real, bins)
    ps = variance_profile(model, synth, bins)
    dims = efficient_dims(pr, threshold)
    top = max(1.0, float(pr.variances.max(initial=0.0)), float(ps.variances.max(initial=0.0)))
    return LsrResult(
        dims=dims,
        real_means=[float(pr.means[j]) for j in dims],
        synth_means=[float(ps.means[j]) for j in dims],
        real_histograms=[pr.histogram(j, top) for j in dims],
        synth_histograms=[ps.histogram(j, top) for j in dims],
        threshold=threshold,
    )


def shuffle_columns(x: np.ndarray, seed: int) -> np.ndarray:
    """Permute each column independently: marginals kept, joint structure destroyed."""
    rng = np.random.default_rng(seed)
    out = np.array(x, copy=True)
    for j in range(out.shape[1]):
        out[:, j] = out[rng.permutation(len(out)), j]
    return out


def toy_factor_data(
    n: int, width: int = 10, factors: int = 2, noise: float = 0.05, gain: float = 1.0, seed: int = 0
) -> np.ndarray:
    """Records generated from ``factors`` latent Gaussians through a random tanh map."""
    rng = np.random.default_rng(seed)
    f = rng.standard_normal((n, factors))
    a = rng.normal(0.0, gain, (factors, width))
    b = rng.normal(0.0, 0.5, width)
    return np.tanh(f @ a + b) + noise * rng.standard_normal((n, width))
