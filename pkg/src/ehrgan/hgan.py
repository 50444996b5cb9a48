"""Conditional Wasserstein GAN with gradient penalty and constraint penalty.

The critic objective (minimized) is::

    -(E[D(x)] - E[D(x_fake)]) + lambda * E[(||grad D(x_hat + delta)|| - 1)^2]

and the generator objective is::

    -E[D(x_fake)] + beta * sum_c E[penalty_c(x_fake)]

Between dense layers HGAN filters with ReLU -> conditional norm -> ReLU;
the HGAN-U ablation uses conditional norm -> ReLU.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import __version__
from . import gradcore as gc
from .schema import Cohort, Constraint, RecordSchema, Scaler, constraint_penalty_value, decode_cohort, encode_cohort, violation_matrix

log = logging.getLogger(__name__)

FILTER_ORDERS = ("relu_norm_relu", "norm_relu")
FULL_G_WIDTHS = (128, 256, 256, 512, 512, 512, 512, 767)
FULL_D_WIDTHS = (767, 512, 384, 256, 256, 128, 128, 1)
CHECKPOINT_FORMAT = "ehrgan-checkpoint/1"
DIVERGENCE_LIMIT = 1e6


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, history: list | None = None):
        super().__init__(message)
        self.history = history or []


@dataclass
class GanConfig:
    g_widths: tuple[int, ...] = FULL_G_WIDTHS
    d_widths: tuple[int, ...] = FULL_D_WIDTHS
    age_emb: int = 96
    gender_emb: int = 32
    lr_g: float = 4e-6
    lr_d: float = 2e-5
    epochs: int = 1000
    batch_size: int = 256
    lam: float = 10.0
    beta: float = 10.0
    a: float = 0.01
    n_critic: int = 5
    filter_order: str = "relu_norm_relu"
    probe_size: int = 1000
    dtype: str = "float64"

    def __post_init__(self):
        self.g_widths = tuple(int(w) for w in self.g_widths)
        self.d_widths = tuple(int(w) for w in self.d_widths)
        if min(self.g_widths + self.d_widths) <= 0:
            raise ValueError("layer widths must be positive")
        if self.d_widths[-1] != 1:
            raise ValueError("the critic's last width must be 1")
        if self.g_widths[-1] != self.d_widths[0]:
            raise ValueError("generator output width must equal critic input width")
        if self.lam < 0 or self.beta < 0 or self.a < 0:
            raise ValueError("lambda, beta and a must be non-negative")
        if self.filter_order not in FILTER_ORDERS:
            raise ValueError(f"filter_order must be one of {FILTER_ORDERS}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.n_critic < 1 or self.batch_size < 2:
            raise ValueError("n_critic >= 1 and batch_size >= 2 required")

    @property
    def noise_dim(self) -> int:
        return self.g_widths[0]

    @classmethod
    def for_width(cls, width: int, shrink: int = 1, **overrides) -> "GanConfig":
        """Full-scale layer layout with input/output widths set to ``width``, hidden widths divided by ``shrink``."""
        g = tuple(max(1, w // shrink) for w in FULL_G_WIDTHS[:-1]) + (width,)
        d = (width,) + tuple(max(1, w // shrink) for w in FULL_D_WIDTHS[1:-1]) + (1,)
        return cls(g_widths=g, d_widths=d, **overrides)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["g_widths"] = list(self.g_widths)
        d["d_widths"] = list(self.d_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GanConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# networks


def _filter(h, norm: gc.CondNorm, cond, order: str, training: bool):
    if order == "relu_norm_relu":
        return gc.relu(gc.cond_norm(norm, gc.relu(h), cond, training))
    return gc.relu(gc.cond_norm(norm, h, cond, training))


class _Net:
    kind = "net"

    def __init__(self, widths, norm_kind: str, config: GanConfig, rng: np.random.Generator, name: str):
        self.filter_order = config.filter_order
        self.dtype = config.dtype
        self.embed = gc.ConditionEmbeddings.init(rng, age_dim=config.age_emb, gender_dim=config.gender_emb, name=f"{name}.embed")
        self.layers = [gc.Dense.init(a, b, rng, name=f"{name}.dense{i}") for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))]
        self.norms = [
            gc.CondNorm.init(norm_kind, w, self.embed.width, rng, name=f"{name}.norm{i}") for i, w in enumerate(widths[1:-1])
        ]

    def parameters(self) -> list[gc.Tensor]:
        out = self.embed.parameters()
        for layer in self.layers:
            out += layer.parameters()
        for norm in self.norms:
            out += norm.parameters()
        return out

    def conditions(self, ages, genders) -> gc.Conditions:
        return self.embed.lookup(ages, genders)

    def _trunk(self, x, cond: gc.Conditions, training: bool, trace: list | None = None):
        h = x
        for i, layer in enumerate(self.layers):
            h = gc.forward_dense(layer, h)
            if i < len(self.norms):
                h = _filter(h, self.norms[i], cond, self.filter_order, training)
                if trace is not None:
                    trace.append(h.value)
        return h

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, n in enumerate(self.norms):
            if n.running_mean is not None:
                out[f"norm{i}.running_mean"] = n.running_mean
                out[f"norm{i}.running_var"] = n.running_var
        return out

    def load_buffers(self, buffers: dict[str, np.ndarray]) -> None:
        for i, n in enumerate(self.norms):
            if n.running_mean is not None:
                n.running_mean = np.array(buffers[f"norm{i}.running_mean"], dtype=np.float64)
                n.running_var = np.array(buffers[f"norm{i}.running_var"], dtype=np.float64)


class Generator(_Net):
    kind = "generator"

    def __init__(self, config: GanConfig, rng: np.random.Generator):
        super().__init__(config.g_widths, "batch", config, rng, "g")

    def __call__(self, z, ages, genders, training: bool = True, trace: list | None = None) -> gc.Tensor:
        return self.forward(z, self.conditions(ages, genders), training, trace)

    def forward(self, z, cond: gc.Conditions, training: bool = True, trace: list | None = None) -> gc.Tensor:
        return gc.sigmoid(self._trunk(z, cond, training, trace))


class Discriminator(_Net):
    kind = "discriminator"

    def __init__(self, config: GanConfig, rng: np.random.Generator):
        super().__init__(config.d_widths, "layer", config, rng, "d")

    def __call__(self, x, ages, genders, training: bool = True, trace: list | None = None) -> gc.Tensor:
        return self.forward(x, self.conditions(ages, genders), training, trace)

    def forward(self, x, cond: gc.Conditions, training: bool = True, trace: list | None = None) -> gc.Tensor:
        return self._trunk(x, cond, training, trace)


@contextmanager
def frozen(params: Sequence[gc.Tensor]):
    """Temporarily stop tracking gradients for ``params``."""
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, s in zip(params, saved):
            p.requires_grad = s


# ---------------------------------------------------------------------------
# losses


def critic_loss(
    d_forward: Callable[[gc.Tensor], gc.Tensor],
    x_real: np.ndarray,
    x_fake: np.ndarray,
    lam: float,
    a: float,
    rng: np.random.Generator,
    tape: gc.Tape,
) -> tuple[gc.Tensor, dict]:
    """Critic objective for one batch; ``d_forward`` maps a batch to scores."""
    n = len(x_real)
    if n < 2:
        raise ValueError("critic loss needs a batch of at least 2 rows")
    real_score = gc.mean(d_forward(gc.Tensor(x_real)))
    fake_score = gc.mean(d_forward(gc.Tensor(x_fake)))
    u = rng.random((n, 1))
    x_hat = u * x_real + (1.0 - u) * x_fake
    delta = math.sqrt(a) * rng.standard_normal(x_hat.shape)
    gp = gc.grad_norm_penalty(d_forward, x_hat, delta, tape)
    wdist = gc.sub(real_score, fake_score)
    loss = gc.add(gc.neg(wdist), gc.mul(gp, lam))
    return loss, {"wasserstein": float(wdist.value), "gradient_penalty": float(gp.value)}


def constraint_penalty(x_fake, constraints: Sequence[Constraint], schema: RecordSchema, genders=None) -> gc.Tensor:
    """Sum over constraints of the batch-mean penalty."""
    total = gc.Tensor(0.0)
    for c in constraints:
        total = gc.add(total, gc.mean(constraint_penalty_value(x_fake, c, schema, genders)))
    return total


def generator_loss(
    d_forward: Callable[[gc.Tensor], gc.Tensor],
    x_fake,
    beta: float,
    constraints: Sequence[Constraint],
    schema: RecordSchema,
    genders=None,
) -> tuple[gc.Tensor, dict]:
    adv = gc.neg(gc.mean(d_forward(x_fake)))
    if beta == 0 or not constraints:
        return adv, {"adversarial": float(adv.value), "constraint_penalty": 0.0}
    pen = constraint_penalty(x_fake, constraints, schema, genders)
    loss = gc.add(adv, gc.mul(pen, beta))
    return loss, {"adversarial": float(adv.value), "constraint_penalty": float(pen.value)}


def d_loss(d: Discriminator, g: Generator, x_real, ages, genders, config: GanConfig, rng, tape: gc.Tape):
    z = rng.standard_normal((len(x_real), config.noise_dim))
    with gc.no_grad():
        x_fake = g(z, ages, genders, training=True).value
    cond = d.conditions(ages, genders)
    return critic_loss(lambda x: d.forward(x, cond), x_real, x_fake, config.lam, config.a, rng, tape)


def g_loss(d: Discriminator, g: Generator, ages, genders, config: GanConfig, constraints, schema, rng):
    z = rng.standard_normal((len(ages), config.noise_dim))
    x_fake = g(z, ages, genders, training=True)
    cond = d.conditions(ages, genders)
    return generator_loss(lambda x: d.forward(x, cond), x_fake, config.beta, constraints, schema, genders)


# ---------------------------------------------------------------------------
# model, training, generation


@dataclass
class HganModel:
    config: GanConfig
    schema: RecordSchema
    scaler: Scaler
    generator: Generator
    discriminator: Discriminator
    cond_ages: np.ndarray
    cond_genders: np.ndarray
    history: list = field(default_factory=list)

    @classmethod
    def init(cls, config: GanConfig, schema: RecordSchema, scaler: Scaler, cohort: Cohort, seed: int) -> "HganModel":
        if config.g_widths[-1] != schema.width:
            raise ValueError(f"generator output width {config.g_widths[-1]} does not match schema width {schema.width}")
        rng = np.random.default_rng([seed, 0])
        g = Generator(config, rng)
        d = Discriminator(config, rng)
        return cls(config, schema, scaler, g, d, cohort.age.copy(), cohort.gender.copy())

    @property
    def constraints(self) -> list[Constraint]:
        return self.schema.constraints


@dataclass
class EpochLog:
    epoch: int
    d_loss: float
    g_loss: float
    wasserstein: float
    gradient_penalty: float
    constraint_penalty: float
    violation_rate: float
    activation_rate: list


def train(config: GanConfig, cohort: Cohort, seed: int, scaler: Scaler | None = None, progress: Callable | None = None) -> HganModel:
    """Alternate ``n_critic`` critic steps with one generator step.

    An epoch is one pass over the shuffled cohort in critic-sized batches
    (a trailing partial batch is dropped).  After each epoch a probe batch is
    generated to record the constraint violation rate and activation rates.
    """
    if len(cohort) < 2:
        raise ValueError("training needs at least 2 records")
    with gc.precision(config.dtype):
        return _train(config, cohort, seed, scaler or Scaler.fit(cohort.vitals), progress)


def _train(config: GanConfig, cohort: Cohort, seed: int, scaler: Scaler, progress: Callable | None) -> HganModel:
    model = HganModel.init(config, cohort.schema, scaler, cohort, seed)
    x_all, ages_all, genders_all = encode_cohort(cohort, scaler)
    rng = np.random.default_rng([seed, 1])
    probe_rng_seed = [seed, 2]
    g, d = model.generator, model.discriminator
    g_params, d_params = g.parameters(), d.parameters()
    opt_g = gc.AdamState(lr=config.lr_g)
    opt_d = gc.AdamState(lr=config.lr_d)
    constraints = [c for c in model.constraints]
    n = len(cohort)
    bs = min(config.batch_size, n)
    step = 0
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        sums = {"d": 0.0, "g": 0.0, "w": 0.0, "gp": 0.0, "cp": 0.0}
        nd = ng = 0
        for start in range(0, n - bs + 1, bs):
            idx = perm[start : start + bs]
            xb, ab, gb = x_all[idx], ages_all[idx], genders_all[idx]
            with gc.Tape() as tape:
                loss, parts = d_loss(d, g, xb, ab, gb, config, rng, tape)
                _check(loss, "critic", epoch, model.history)
                grads = tape.gradient(loss, d_params)
            tape.release()
            gc.adam_step(d_params, grads, opt_d)
            sums["d"] += float(loss.value)
            sums["w"] += parts["wasserstein"]
            sums["gp"] += parts["gradient_penalty"]
            nd += 1
            step += 1
            if step % config.n_critic == 0:
                with frozen(d_params), gc.Tape() as tape:
                    loss, parts = g_loss(d, g, ab, gb, config, constraints, model.schema, rng)
                    _check(loss, "generator", epoch, model.history)
                    grads = tape.gradient(loss, g_params)
                tape.release()
                gc.adam_step(g_params, grads, opt_g)
                sums["g"] += float(loss.value)
                sums["cp"] += parts["constraint_penalty"]
                ng += 1
        probe = generate(model, config.probe_size, seed=probe_rng_seed + [epoch])
        rates = generator_activation_rates(model, config.probe_size, seed=probe_rng_seed + [epoch])
        entry = EpochLog(
            epoch=epoch,
            d_loss=sums["d"] / max(nd, 1),
            g_loss=sums["g"] / max(ng, 1),
            wasserstein=sums["w"] / max(nd, 1),
            gradient_penalty=sums["gp"] / max(nd, 1),
            constraint_penalty=sums["cp"] / max(ng, 1),
            violation_rate=violation_rate(probe, constraints),
            activation_rate=[float(r.mean()) for r in rates],
        )
        model.history.append(asdict(entry))
        if progress is not None:
            progress(entry)
    return model


def _check(loss: gc.Tensor, which: str, epoch: int, history: list) -> None:
    v = float(loss.value)
    if not math.isfinite(v) or abs(v) > DIVERGENCE_LIMIT:
        raise TrainingDiverged(f"{which} loss {v!r} at epoch {epoch}", history)


def violation_rate(cohort: Cohort, constraints: Sequence[Constraint] | None = None) -> float:
    """Fraction of (record, constraint) pairs violated."""
    m = violation_matrix(cohort, constraints)
    return float(m.mean()) if m.size else 0.0


def sample_conditions(model: HganModel, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    idx = rng.integers(0, len(model.cond_ages), n)
    return model.cond_ages[idx], model.cond_genders[idx]


def generate_features(model: HganModel, n: int, seed, conditions=None, chunk: int = 4096) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Generator outputs in [0, 1] (before decoding) plus the conditions used."""
    rng = np.random.default_rng(seed)
    if conditions is None:
        ages, genders = sample_conditions(model, n, rng)
    else:
        ages, genders = (np.asarray(c, dtype=np.int64) for c in conditions)
    z = rng.standard_normal((n, model.config.noise_dim))
    out = np.empty((n, model.schema.width))
    with gc.no_grad(), gc.precision(model.config.dtype):
        for s in range(0, n, chunk):
            out[s : s + chunk] = model.generator(z[s : s + chunk], ages[s : s + chunk], genders[s : s + chunk], training=False).value
    return out, ages, genders


def generate(model: HganModel, n: int, seed, conditions=None) -> Cohort:
    x, ages, genders = generate_features(model, n, seed, conditions)
    return decode_cohort(x, ages, genders, model.schema, model.scaler)


def activation_rates(net: _Net, inputs: np.ndarray, ages, genders) -> list[np.ndarray]:
    """Per filtered layer, the fraction of inputs giving each neuron a positive activation."""
    if len(inputs) == 0:
        raise ValueError("activation rates need a non-empty sample")
    trace: list[np.ndarray] = []
    with gc.no_grad(), gc.precision(net.dtype):
        net(np.asarray(inputs, dtype=np.float64), ages, genders, training=False, trace=trace)
    return [(h > 0).mean(axis=0) for h in trace]


def generator_activation_rates(model: HganModel, n: int, seed, conditions=None) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    if conditions is None:
        ages, genders = sample_conditions(model, n, rng)
    else:
        ages, genders = conditions
    z = rng.standard_normal((n, model.config.noise_dim))
    return activation_rates(model.generator, z, ages, genders)


# ---------------------------------------------------------------------------
# checkpoints


def _pack(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _unpack(d: dict) -> np.ndarray:
    return np.frombuffer(base64.b64decode(d["data"]), dtype="<f8").reshape(d["shape"]).copy()


def _net_state(net: _Net) -> dict:
    return {
        "parameters": {p.name: _pack(p.value) for p in net.parameters()},
        "buffers": {k: _pack(v) for k, v in net.buffers().items()},
    }


def _load_net(net: _Net, state: dict) -> None:
    for p in net.parameters():
        arr = _unpack(state["parameters"][p.name])
        if arr.shape != p.shape:
            raise ValueError(f"checkpoint shape mismatch for {p.name}")
        p.value = arr.astype(p.value.dtype)
    net.load_buffers({k: _unpack(v) for k, v in state["buffers"].items()})


def save_checkpoint(model: HganModel, path) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": __version__,
        "config": model.config.to_dict(),
        "schema": model.schema.to_dict(),
        "schema_hash": model.schema.hash(),
        "scaler": model.scaler.to_dict(),
        "conditions": {"ages": model.cond_ages.tolist(), "genders": model.cond_genders.tolist()},
        "generator": _net_state(model.generator),
        "discriminator": _net_state(model.discriminator),
        "history": model.history,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_checkpoint(path, schema: RecordSchema | None = None) -> HganModel:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not an {CHECKPOINT_FORMAT} file")
    stored = RecordSchema.from_dict(doc["schema"])
    if stored.hash() != doc["schema_hash"]:
        raise ValueError(f"{path}: schema hash does not match its schema")
    if schema is not None and schema.hash() != doc["schema_hash"]:
        raise ValueError(f"{path}: checkpoint was trained on a different schema ({doc['schema_hash']} != {schema.hash()})")
    config = GanConfig.from_dict(doc["config"])
    rng = np.random.default_rng(0)
    with gc.precision(config.dtype):
        g, d = Generator(config, rng), Discriminator(config, rng)
    model = HganModel(
        config,
        stored,
        Scaler.from_dict(doc["scaler"]),
        g,
        d,
        np.array(doc["conditions"]["ages"], dtype=np.int64),
        np.array(doc["conditions"]["genders"], dtype=np.int64),
        doc.get("history", []),
    )
    _load_net(model.generator, doc["generator"])
    _load_net(model.discriminator, doc["discriminator"])
    return model


def with_overrides(config: GanConfig, **kw) -> GanConfig:
    return replace(config, **{k: v for k, v in kw.items() if v is not None})
