"""Mapping module: feature-vector encoder/decoder trained with an action term.

The encoder and decoder are one-hidden-layer perceptrons (tanh hidden units,
identity outputs) trained by plain SGD with hand-derived backpropagation.
The stochastic mode is a small VAE (reconstruction + beta * KL against a unit
Gaussian prior); the deterministic mode is the plain autoencoder comparison.
Both can be augmented with the contrastive action term: no-action pairs are
pulled together, action pairs pushed at least ``dm`` apart, and ``dm`` grows
during training until action and no-action pair distances separate.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .metrics import Metric
from .tasks import DatasetTuple, Observation


class EncoderMode(enum.Enum):
    STOCHASTIC = "vae"
    DETERMINISTIC = "ae"

    @classmethod
    def parse(cls, name: str) -> "EncoderMode":
        try:
            return cls(name.lower())
        except ValueError:
            raise ValueError(f"unknown encoder mode {name!r}, expected vae or ae") from None


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class LossConfig:
    gamma: float = 100.0
    metric: Metric = Metric.L1
    beta_start: float = 0.0
    beta_end: float = 2.0
    beta_ramp_epochs: int = 400
    recon_weight: float = 200.0
    dm: float = 0.0
    delta_dm: float = 0.1
    k_epochs: int = 5
    dynamic_dm: bool = True
    weight_decay: float = 0.0

    def beta(self, epoch: int) -> float:
        if self.beta_ramp_epochs <= 0:
            return self.beta_end
        t = min(1.0, max(0.0, epoch / self.beta_ramp_epochs))
        return self.beta_start + (self.beta_end - self.beta_start) * t


@dataclass
class LatentPoint:
    z: np.ndarray
    mu: Optional[np.ndarray] = None
    logvar: Optional[np.ndarray] = None


@dataclass
class LatentTuple:
    """An encoded dataset tuple; provenance indices refer to the task's state list."""

    z1: np.ndarray
    z2: np.ndarray
    a: int
    u: object = None
    s1: Optional[int] = None
    s2: Optional[int] = None


_WEIGHT_KEYS = ("enc_w1", "enc_b1", "enc_w2", "enc_b2", "dec_w1", "dec_b1", "dec_w2", "dec_b2")


@dataclass
class EncoderModel:
    mode: EncoderMode
    dim: int
    ld: int
    hidden: int
    params: dict[str, np.ndarray]

    @classmethod
    def init(cls, mode: EncoderMode, dim: int, ld: int, hidden: int = 64, rng_seed: int = 0) -> "EncoderModel":
        if ld < 1:
            raise ValueError("latent dimension must be >= 1")
        rng = np.random.default_rng(rng_seed)
        enc_out = 2 * ld if mode is EncoderMode.STOCHASTIC else ld

        def uniform(shape, fan_in):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, shape)

        params = {
            "enc_w1": uniform((hidden, dim), dim),
            "enc_b1": uniform((hidden,), dim),
            "enc_w2": uniform((enc_out, hidden), hidden),
            "enc_b2": uniform((enc_out,), hidden),
            "dec_w1": uniform((hidden, ld), ld),
            "dec_b1": uniform((hidden,), ld),
            "dec_w2": uniform((dim, hidden), hidden),
            "dec_b2": uniform((dim,), hidden),
        }
        return cls(mode=mode, dim=dim, ld=ld, hidden=hidden, params=params)

    def encoder_forward(self, x: np.ndarray):
        h = np.tanh(x @ self.params["enc_w1"].T + self.params["enc_b1"])
        out = h @ self.params["enc_w2"].T + self.params["enc_b2"]
        return h, out

    def decoder_forward(self, z: np.ndarray):
        g = np.tanh(z @ self.params["dec_w1"].T + self.params["dec_b1"])
        xhat = g @ self.params["dec_w2"].T + self.params["dec_b2"]
        return g, xhat


@dataclass
class IdentityModel:
    """Pass-through encoder/decoder (latent space = feature space).

    Diagnostic stand-in for a perfect mapping; pairs with the ground-truth
    roadmap fixture to verify the scoring harness end to end.
    """

    dim: int
    mode: EncoderMode = EncoderMode.DETERMINISTIC

    @property
    def ld(self) -> int:
        return self.dim


def encode(model: EncoderModel, obs: Observation, deterministic: bool = True, rng_seed: int = 0) -> LatentPoint:
    """Map one observation into the latent space.

    Stochastic models return the posterior mean when ``deterministic`` and a
    reparameterized sample otherwise; deterministic models ignore the flag.
    """
    feats = np.asarray(obs.features, dtype=float)
    if feats.shape != (model.dim,):
        raise ValueError(f"observation dimension {feats.shape} does not match model dim ({model.dim},)")
    if isinstance(model, IdentityModel):
        return LatentPoint(z=feats.copy())
    _, out = model.encoder_forward(feats[None, :])
    if model.mode is EncoderMode.DETERMINISTIC:
        return LatentPoint(z=out[0].copy())
    mu, logvar = out[0, : model.ld], out[0, model.ld:]
    if deterministic:
        return LatentPoint(z=mu.copy(), mu=mu.copy(), logvar=logvar.copy())
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    eps = rng.standard_normal(model.ld)
    z = mu + np.exp(0.5 * logvar) * eps
    return LatentPoint(z=z, mu=mu.copy(), logvar=logvar.copy())


def encode_batch(model: EncoderModel, feats: np.ndarray, deterministic: bool = True, rng=None) -> np.ndarray:
    feats = np.asarray(feats, dtype=float)
    if isinstance(model, IdentityModel):
        return feats.copy()
    _, out = model.encoder_forward(feats)
    if model.mode is EncoderMode.DETERMINISTIC:
        return out
    mu, logvar = out[:, : model.ld], out[:, model.ld:]
    if deterministic:
        return mu
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    return mu + np.exp(0.5 * logvar) * rng.standard_normal(mu.shape)


def decode(model: EncoderModel, z: LatentPoint | np.ndarray) -> Observation:
    vec = z.z if isinstance(z, LatentPoint) else np.asarray(z, dtype=float)
    if vec.shape != (model.ld,):
        raise ValueError(f"latent dimension {vec.shape} does not match model ld ({model.ld},)")
    if isinstance(model, IdentityModel):
        return Observation(features=vec.copy(), state=None)
    _, xhat = model.decoder_forward(vec[None, :])
    return Observation(features=xhat[0], state=None)


def decode_batch(model: EncoderModel, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if isinstance(model, IdentityModel):
        return z.copy()
    _, xhat = model.decoder_forward(z)
    return xhat


# ---------------------------------------------------------------------------
# loss terms
# ---------------------------------------------------------------------------

def _pair_distance_and_grad(delta: np.ndarray, metric: Metric):
    """Distances of row pairs and the gradient of d wrt z1 (z2 gets the negative)."""
    if metric is Metric.L1:
        d = np.sum(np.abs(delta), axis=1)
        grad = np.sign(delta)
    elif metric is Metric.L2:
        d = np.sqrt(np.sum(delta * delta, axis=1))
        safe = np.where(d > 0.0, d, 1.0)
        grad = delta / safe[:, None]
        grad[d == 0.0] = 0.0
    else:
        d = np.max(np.abs(delta), axis=1)
        grad = np.zeros_like(delta)
        idx = np.argmax(np.abs(delta), axis=1)
        rows = np.arange(delta.shape[0])
        grad[rows, idx] = np.sign(delta[rows, idx])
    return d, grad


def action_loss(z1: LatentPoint | np.ndarray, z2: LatentPoint | np.ndarray, a: int, cfg: LossConfig) -> float:
    """Contrastive action term: hinge at ``dm`` for action pairs, plain distance otherwise."""
    v1 = z1.z if isinstance(z1, LatentPoint) else np.asarray(z1, dtype=float)
    v2 = z2.z if isinstance(z2, LatentPoint) else np.asarray(z2, dtype=float)
    if v1.shape != v2.shape:
        raise ValueError(f"latent dimension mismatch: {v1.shape} vs {v2.shape}")
    d, _ = _pair_distance_and_grad((v1 - v2)[None, :], cfg.metric)
    if a:
        return float(max(0.0, cfg.dm - d[0]))
    return float(d[0])


def _kl_terms(mu: np.ndarray, logvar: np.ndarray):
    kl = 0.5 * np.sum(mu * mu + np.exp(logvar) - 1.0 - logvar, axis=1)
    return kl


def loss_and_grads(
    model: EncoderModel,
    x1: np.ndarray,
    x2: np.ndarray,
    a: np.ndarray,
    cfg: LossConfig,
    beta: float,
    eps1: Optional[np.ndarray] = None,
    eps2: Optional[np.ndarray] = None,
    rng=None,
):
    """Batch loss with per-term breakdown and analytic parameter gradients.

    ``eps1``/``eps2`` fix the reparameterization noise (needed by the
    finite-difference gradient checks); if omitted they are sampled.
    """
    n = x1.shape[0]
    stochastic = model.mode is EncoderMode.STOCHASTIC
    if stochastic:
        if eps1 is None or eps2 is None:
            rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
            eps1 = rng.standard_normal((n, model.ld))
            eps2 = rng.standard_normal((n, model.ld))

    h1, out1 = model.encoder_forward(x1)
    h2, out2 = model.encoder_forward(x2)
    if stochastic:
        mu1, lv1 = out1[:, : model.ld], out1[:, model.ld:]
        mu2, lv2 = out2[:, : model.ld], out2[:, model.ld:]
        z1 = mu1 + np.exp(0.5 * lv1) * eps1
        z2 = mu2 + np.exp(0.5 * lv2) * eps2
        kl1, kl2 = _kl_terms(mu1, lv1), _kl_terms(mu2, lv2)
    else:
        z1, z2 = out1, out2
        kl1 = kl2 = np.zeros(n)

    g1, xhat1 = model.decoder_forward(z1)
    g2, xhat2 = model.decoder_forward(z2)
    r1 = cfg.recon_weight * np.sum((x1 - xhat1) ** 2, axis=1)
    r2 = cfg.recon_weight * np.sum((x2 - xhat2) ** 2, axis=1)

    delta = z1 - z2
    d, dgrad = _pair_distance_and_grad(delta, cfg.metric)
    act = np.where(a == 1, np.maximum(0.0, cfg.dm - d), d)

    recon_mean = float(np.mean(0.5 * (r1 + r2)))
    kl_mean = float(np.mean(0.5 * (kl1 + kl2)))
    act_mean = float(np.mean(act))
    penalty = 0.0
    if cfg.weight_decay > 0.0:
        penalty = cfg.weight_decay * sum(
            float(np.sum(model.params[k] ** 2)) for k in ("enc_w1", "enc_w2", "dec_w1", "dec_w2")
        )
    total = recon_mean + beta * kl_mean + cfg.gamma * act_mean + penalty

    # --- backward ---
    grads = {k: np.zeros_like(v) for k, v in model.params.items()}

    def decoder_backward(gout, g, z):
        grads["dec_w2"] += gout.T @ g
        grads["dec_b2"] += gout.sum(axis=0)
        dg = gout @ model.params["dec_w2"]
        dpre = dg * (1.0 - g * g)
        grads["dec_w1"] += dpre.T @ z
        grads["dec_b1"] += dpre.sum(axis=0)
        return dpre @ model.params["dec_w1"]

    gout1 = (cfg.recon_weight / n) * (xhat1 - x1)
    gout2 = (cfg.recon_weight / n) * (xhat2 - x2)
    dz1 = decoder_backward(gout1, g1, z1)
    dz2 = decoder_backward(gout2, g2, z2)

    # action term: grad of d wrt z1 is dgrad; hinge flips sign where active
    coeff = np.where(a == 1, np.where(d < cfg.dm, -1.0, 0.0), 1.0)
    dz_act = (cfg.gamma / n) * coeff[:, None] * dgrad
    dz1 = dz1 + dz_act
    dz2 = dz2 - dz_act

    def encoder_backward(dz, h, x, mu=None, lv=None, eps=None, kl_scale=0.0):
        if stochastic:
            dmu = dz + kl_scale * mu
            dlv = dz * 0.5 * np.exp(0.5 * lv) * eps + kl_scale * 0.5 * (np.exp(lv) - 1.0)
            dout = np.concatenate([dmu, dlv], axis=1)
        else:
            dout = dz
        grads["enc_w2"] += dout.T @ h
        grads["enc_b2"] += dout.sum(axis=0)
        dh = dout @ model.params["enc_w2"]
        dpre = dh * (1.0 - h * h)
        grads["enc_w1"] += dpre.T @ x
        grads["enc_b1"] += dpre.sum(axis=0)

    kl_scale = beta * 0.5 / n if stochastic else 0.0
    if stochastic:
        encoder_backward(dz1, h1, x1, mu1, lv1, eps1, kl_scale)
        encoder_backward(dz2, h2, x2, mu2, lv2, eps2, kl_scale)
    else:
        encoder_backward(dz1, h1, x1)
        encoder_backward(dz2, h2, x2)

    if cfg.weight_decay > 0.0:
        for k in ("enc_w1", "enc_w2", "dec_w1", "dec_w2"):
            grads[k] += 2.0 * cfg.weight_decay * model.params[k]

    if not np.isfinite(total):
        raise TrainingDivergedError(
            f"non-finite loss (recon={recon_mean:.4g}, kl={kl_mean:.4g}, action={act_mean:.4g})"
        )
    breakdown = {"recon": recon_mean, "kl": kl_mean, "action": act_mean, "total": total}
    return total, breakdown, grads


def total_loss(model: EncoderModel, tup: DatasetTuple, cfg: LossConfig, epoch: int, rng_seed: int = 0):
    """Loss of one dataset tuple at ``epoch`` with per-term breakdown.

    Training uses :func:`loss_and_grads` on batches; this is the single-tuple
    entry point (reconstruction + beta(epoch) * KL + gamma * action).
    """
    x1 = np.asarray(tup.obs1.features, dtype=float)[None, :]
    x2 = np.asarray(tup.obs2.features, dtype=float)[None, :]
    a = np.array([tup.a])
    beta = cfg.beta(epoch)
    total, breakdown, _ = loss_and_grads(model, x1, x2, a, cfg, beta, rng=np.random.default_rng(rng_seed))
    return total, breakdown


class AdamState:
    """Adam moment accumulators over a parameter dict (beta1=0.9, beta2=0.999)."""

    def __init__(self, params: dict[str, np.ndarray], learning_rate: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        scale1 = 1.0 - self.beta1 ** self.t
        scale2 = 1.0 - self.beta2 ** self.t
        for key, grad in grads.items():
            m = self.m[key]
            v = self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            params[key] -= self.lr * (m / scale1) / (np.sqrt(v / scale2) + self.eps)


@dataclass
class TrainingTrace:
    epochs: list[int] = field(default_factory=list)
    recon: list[float] = field(default_factory=list)
    kl: list[float] = field(default_factory=list)
    action: list[float] = field(default_factory=list)
    total: list[float] = field(default_factory=list)
    beta: list[float] = field(default_factory=list)
    dm: list[float] = field(default_factory=list)

    def final_dm(self) -> float:
        return self.dm[-1] if self.dm else 0.0


def pair_distances(model: EncoderModel, dataset: list[DatasetTuple], metric: Metric,
                   deterministic: bool = False, rng=None):
    """(action distances, no-action distances) over the dataset.

    By default the distances are between reparameterized samples, matching the
    statistic the margin schedule separates during training; pass
    ``deterministic=True`` for posterior means.
    """
    x1 = np.stack([t.obs1.features for t in dataset])
    x2 = np.stack([t.obs2.features for t in dataset])
    a = np.array([t.a for t in dataset])
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    z1 = encode_batch(model, x1, deterministic=deterministic, rng=rng)
    z2 = encode_batch(model, x2, deterministic=deterministic, rng=rng)
    d, _ = _pair_distance_and_grad(z1 - z2, metric)
    return d[a == 1], d[a == 0]


def pair_separation(model: EncoderModel, dataset: list[DatasetTuple], metric: Metric,
                    deterministic: bool = False, rng=None):
    """(min action distance, max no-action distance); positive gap = separated."""
    action_d, noaction_d = pair_distances(model, dataset, metric, deterministic, rng)
    min_action = float(np.min(action_d)) if action_d.size else float("inf")
    max_noaction = float(np.max(noaction_d)) if noaction_d.size else 0.0
    return min_action, max_noaction


def train(
    model: EncoderModel,
    dataset: list[DatasetTuple],
    cfg: LossConfig,
    epochs: int = 500,
    rng_seed: int = 0,
    learning_rate: float = 1e-3,
    batch_size: int = 32,
) -> tuple[EncoderModel, TrainingTrace]:
    """Mini-batch Adam training; mutates ``model`` in place and returns it
    with the per-epoch trace.

    Every ``cfg.k_epochs`` epochs the margin ``dm`` grows by ``cfg.delta_dm``
    while the maximum no-action pair distance still exceeds the minimum action
    pair distance on the full training set (dynamic mode only).
    """
    if not dataset:
        raise ValueError("dataset is empty")
    if cfg.gamma > 0 and cfg.dynamic_dm:
        kinds = {t.a for t in dataset}
        if kinds != {0, 1}:
            raise ValueError("dynamic dm schedule needs both action and no-action pairs")

    cfg = replace(cfg)
    x1 = np.stack([np.asarray(t.obs1.features, dtype=float) for t in dataset])
    x2 = np.stack([np.asarray(t.obs2.features, dtype=float) for t in dataset])
    a = np.array([t.a for t in dataset])
    rng = np.random.default_rng(rng_seed)
    trace = TrainingTrace()
    optimizer = AdamState(model.params, learning_rate)

    for epoch in range(epochs):
        beta = cfg.beta(epoch)
        order = rng.permutation(len(dataset))
        sums = {"recon": 0.0, "kl": 0.0, "action": 0.0, "total": 0.0}
        n_batches = 0
        for start in range(0, len(dataset), batch_size):
            idx = order[start: start + batch_size]
            _, breakdown, grads = loss_and_grads(model, x1[idx], x2[idx], a[idx], cfg, beta, rng=rng)
            optimizer.step(model.params, grads)
            for key in sums:
                sums[key] += breakdown[key]
            n_batches += 1

        trace.epochs.append(epoch)
        for key in ("recon", "kl", "action", "total"):
            getattr(trace, key).append(sums[key] / n_batches)
        trace.beta.append(beta)

        if cfg.dynamic_dm and cfg.gamma > 0 and (epoch + 1) % cfg.k_epochs == 0:
            min_action, max_noaction = pair_separation(model, dataset, cfg.metric, rng=rng)
            if max_noaction > min_action:
                cfg.dm += cfg.delta_dm
        trace.dm.append(cfg.dm)

    return model, trace


def augment_apn_dataset(model: EncoderModel, action_tuples: list[DatasetTuple], s: int, rng_seed: int = 0):
    """Latent action tuples for APN training: the posterior means plus ``s``
    reparameterized samples per pair (output size (s+1) * input size)."""
    if model.mode is EncoderMode.DETERMINISTIC:
        raise ValueError("sampling unavailable: deterministic encoders have no posterior to sample")
    if any(t.a != 1 for t in action_tuples):
        raise ValueError("augment_apn_dataset expects action tuples only")
    rng = np.random.default_rng(rng_seed)
    out = []
    if not action_tuples:
        return out
    x1 = np.stack([t.obs1.features for t in action_tuples])
    x2 = np.stack([t.obs2.features for t in action_tuples])
    _, out1 = model.encoder_forward(x1)
    _, out2 = model.encoder_forward(x2)
    mu1, lv1 = out1[:, : model.ld], out1[:, model.ld:]
    mu2, lv2 = out2[:, : model.ld], out2[:, model.ld:]
    for i, tup in enumerate(action_tuples):
        out.append(LatentTuple(z1=mu1[i].copy(), z2=mu2[i].copy(), a=1, u=tup.u))
    for _ in range(s):
        e1 = rng.standard_normal(mu1.shape)
        e2 = rng.standard_normal(mu2.shape)
        z1 = mu1 + np.exp(0.5 * lv1) * e1
        z2 = mu2 + np.exp(0.5 * lv2) * e2
        for i, tup in enumerate(action_tuples):
            out.append(LatentTuple(z1=z1[i], z2=z2[i], a=1, u=tup.u))
    return out
