"""Amortized-residual DAE: a patch MLP trained so that -R(y) approximates
the marginal score.

Per step, with annealing scale sigma_a drawn from a geometric schedule,

    loss = mean over batch of  (u_c + sigma_a * R(patch + sigma_a * u))^2

where u is a standard-normal draw over the whole patch and u_c its value at
the center pixel (the network predicts the score at the center).  As
sigma_a -> 0 the minimizer of the population loss is the score of the
sigma_a-smoothed marginal, so R converges to l'(y).

Architecture: fully connected tanh layers on flattened (2r+1) x (2r+1)
patches with a linear head.  The first layer sees (x - 0.5) * 4 rather than
raw intensities: inputs living in (0, 1] are far from odd-symmetric around
zero, which starves the first-layer gradient; the fixed affine coupling is
part of the architecture, not a data-dependent normalization.

An EMA shadow copy (theta' <- m*theta' + (1-m)*theta after every step) is
what inference uses.  Optimization is Adam with (0.9, 0.999) and a single
ten-fold learning-rate drop halfway through the epochs.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, TrainingDivergence
from .scores import ScoreField, geometric_schedule

IN_SHIFT = 0.5
IN_GAIN = 4.0

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_VERSION = 1


@dataclass
class ArdaeConfig:
    sigma_a_max: float = 0.1
    sigma_a_min: float = 0.001
    schedule_len: int = 10
    ema_decay: float = 0.999
    epochs: int = 100
    batch_size: int = 4096
    lr: float = 2e-4
    lr_decay_epoch: int | None = None  # defaults to epochs // 2
    patch_radius: int = 4
    hidden: tuple = (128, 128)
    seed: int = 0

    def validate(self) -> "ArdaeConfig":
        if not (0 < self.sigma_a_min <= self.sigma_a_max):
            raise DomainError("need 0 < sigma_a_min <= sigma_a_max")
        if not (0 <= self.ema_decay < 1):
            raise DomainError("ema_decay must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1 or self.schedule_len < 2:
            raise DomainError("bad epochs/batch_size/schedule_len")
        if self.lr <= 0 or self.patch_radius < 0:
            raise DomainError("bad lr/patch_radius")
        return self

    @property
    def patch_dim(self) -> int:
        return (2 * self.patch_radius + 1) ** 2

    @property
    def layer_sizes(self) -> list:
        return [self.patch_dim, *self.hidden, 1]


@dataclass
class MlpParams:
    """Weights/biases plus the EMA shadow copy, all same shapes."""

    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    ema_weights: list = field(default_factory=list)
    ema_biases: list = field(default_factory=list)

    @property
    def layer_sizes(self) -> list:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def copy(self) -> "MlpParams":
        return MlpParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            [w.copy() for w in self.ema_weights],
            [b.copy() for b in self.ema_biases],
        )


def init_mlp(layer_sizes, seed: int) -> MlpParams:
    """Scaled-normal weights, zero biases; EMA copy starts equal."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 10]))
    ws, bs = [], []
    for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        ws.append(rng.standard_normal((n_in, n_out)) / np.sqrt(n_in))
        bs.append(np.zeros(n_out))
    return MlpParams(ws, bs, [w.copy() for w in ws], [b.copy() for b in bs])


def mlp_forward(params: MlpParams, x: np.ndarray, use_ema: bool = False):
    """Forward pass; returns (output (N,), activations cache for backprop)."""
    ws = params.ema_weights if use_ema else params.weights
    bs = params.ema_biases if use_ema else params.biases
    h = (np.asarray(x, dtype=np.float64) - IN_SHIFT) * IN_GAIN
    acts = [h]
    for W, b in zip(ws[:-1], bs[:-1]):
        h = np.tanh(h @ W + b)
        acts.append(h)
    out = h @ ws[-1] + bs[-1]
    return out[:, 0], acts


def mlp_backward(params: MlpParams, acts, dout: np.ndarray):
    """Gradients of sum(dout * output) w.r.t. weights and biases."""
    ws = params.weights
    gws = [None] * len(ws)
    gbs = [None] * len(ws)
    delta = dout[:, None]  # (N, 1)
    gws[-1] = acts[-1].T @ delta
    gbs[-1] = delta.sum(axis=0)
    for i in range(len(ws) - 2, -1, -1):
        delta = (delta @ ws[i + 1].T) * (1.0 - acts[i + 1] ** 2)
        gws[i] = acts[i].T @ delta
        gbs[i] = delta.sum(axis=0)
    return gws, gbs


def ardae_loss_and_grad(params: MlpParams, batch: np.ndarray, sigma_a: float, seed: int,
                        _forward=None):
    """Loss mean (u_c + sigma_a R(y + sigma_a u))^2 over the batch and its
    exact parameter gradients.

    ``batch`` is (N, D) with the center pixel at column D // 2; u is drawn
    per element from the given seed.  ``_forward`` is a test hook replacing
    the network evaluation.
    """
    if sigma_a <= 0:
        raise DomainError(f"sigma_a must be positive, got {sigma_a}")
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[0] == 0:
        raise DomainError("batch must be a nonempty (N, D) array")
    n, d = batch.shape
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 11]))
    u = rng.standard_normal((n, d))
    u_c = u[:, d // 2]
    noisy = batch + sigma_a * u
    if _forward is not None:
        r = np.asarray(_forward(noisy), dtype=np.float64)
        acts = None
    else:
        r, acts = mlp_forward(params, noisy)
    resid = u_c + sigma_a * r
    loss = float(np.mean(resid**2))
    if not np.isfinite(loss):
        raise TrainingDivergence(f"non-finite loss {loss!r}")
    if acts is None:
        return loss, None
    dout = 2.0 * sigma_a * resid / n
    gws, gbs = mlp_backward(params, acts, dout)
    return loss, (gws, gbs)


def extract_patches(img: np.ndarray, radius: int) -> np.ndarray:
    """(H*W, (2r+1)^2) rows of reflect-padded context patches."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 1:
        if radius != 0:
            raise DomainError("1-D data only supports patch_radius = 0")
        return img[:, None]
    if img.ndim != 2:
        raise DomainError(f"expected 1-D or 2-D data, got shape {img.shape}")
    if radius == 0:
        return img.reshape(-1, 1)
    p = np.pad(img, radius, mode="reflect")
    win = np.lib.stride_tricks.sliding_window_view(p, (2 * radius + 1, 2 * radius + 1))
    return win.reshape(img.shape[0] * img.shape[1], -1)


def _adam_step(params, grads, state, lr, t):
    gws, gbs = grads
    for group, grad_list, key in ((params.weights, gws, "w"), (params.biases, gbs, "b")):
        for i, g in enumerate(grad_list):
            m, v = state[key][i]
            m[:] = ADAM_BETA1 * m + (1 - ADAM_BETA1) * g
            v[:] = ADAM_BETA2 * v + (1 - ADAM_BETA2) * g * g
            mhat = m / (1 - ADAM_BETA1**t)
            vhat = v / (1 - ADAM_BETA2**t)
            group[i] -= lr * mhat / (np.sqrt(vhat) + ADAM_EPS)


def ema_update(params: MlpParams, m: float) -> None:
    """One shadow-average step Theta' <- m*Theta' + (1-m)*Theta, in place.

    With constant Theta this contracts ||Theta' - Theta|| by the factor m
    per call; m = 0 makes the copy track Theta exactly.
    """
    for w, ew in zip(params.weights, params.ema_weights):
        ew *= m
        ew += (1 - m) * w
    for b, eb in zip(params.biases, params.ema_biases):
        eb *= m
        eb += (1 - m) * b


def train_ardae(config: ArdaeConfig, data) -> tuple:
    """Mini-batch AR-DAE training over the pooled patches of ``data``.

    ``data`` is a sequence of noisy arrays (2-D images, or 1-D samples when
    patch_radius = 0).  Returns (MlpParams with EMA copy, history) where
    history is one (epoch, mean_loss, lr) triple per epoch.  A non-finite
    loss aborts with :class:`TrainingDivergence` carrying the last
    finite-loss snapshot.
    """
    config.validate()
    arrays = [data] if isinstance(data, np.ndarray) else list(data)
    if not arrays:
        raise DomainError("no training data")
    X = np.concatenate([extract_patches(a, config.patch_radius) for a in arrays], axis=0)
    params = init_mlp(config.layer_sizes, config.seed)
    history = []
    if config.epochs == 0:
        return params, history

    schedule = geometric_schedule(config.sigma_a_max, config.sigma_a_min, config.schedule_len)
    decay_at = config.lr_decay_epoch if config.lr_decay_epoch is not None else config.epochs // 2
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 12]))
    state = {
        "w": [(np.zeros_like(w), np.zeros_like(w)) for w in params.weights],
        "b": [(np.zeros_like(b), np.zeros_like(b)) for b in params.biases],
    }
    m = config.ema_decay
    last_good = params.copy()
    t = 0
    for epoch in range(config.epochs):
        lr = config.lr / 10.0 if epoch >= decay_at else config.lr
        perm = rng.permutation(X.shape[0])
        losses = []
        for lo in range(0, X.shape[0], config.batch_size):
            idx = perm[lo : lo + config.batch_size]
            if idx.size < 2:
                continue
            sigma_a = schedule[rng.integers(0, config.schedule_len)]
            step_seed = int(rng.integers(0, 2**63 - 1))
            try:
                loss, grads = ardae_loss_and_grad(params, X[idx], sigma_a, step_seed)
            except TrainingDivergence as exc:
                raise TrainingDivergence(
                    f"diverged at epoch {epoch}: {exc}", last_good=last_good
                ) from exc
            t += 1
            _adam_step(params, grads, state, lr, t)
            ema_update(params, m)
            losses.append(loss)
            last_good = params.copy()
        history.append((epoch, float(np.mean(losses)), lr))
    return params, history


def eval_score(params: MlpParams, y: np.ndarray, use_ema: bool = True) -> ScoreField:
    """Score field over an image: the network applied per context patch.

    Border pixels see reflect padding.  Pure; repeated calls are
    bit-identical.
    """
    y = np.asarray(y, dtype=np.float64)
    dim = params.layer_sizes[0]
    radius = (int(np.sqrt(dim)) - 1) // 2
    if (2 * radius + 1) ** 2 != dim:
        raise DomainError(f"non-square input layer of width {dim}")
    patches = extract_patches(y, radius)
    out, _ = mlp_forward(params, patches, use_ema=use_ema)
    return ScoreField(out.reshape(y.shape), backend="ardae")


def save_checkpoint(path, params: MlpParams, config: ArdaeConfig) -> None:
    """Versioned npz blob: JSON header + parameter arrays."""
    header = {
        "version": CHECKPOINT_VERSION,
        "layer_sizes": params.layer_sizes,
        "ema": True,
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(config).items()},
    }
    arrays = {"header": np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)}
    for i, (w, b, ew, eb) in enumerate(
        zip(params.weights, params.biases, params.ema_weights, params.ema_biases)
    ):
        arrays[f"w{i}"] = w
        arrays[f"b{i}"] = b
        arrays[f"ew{i}"] = ew
        arrays[f"eb{i}"] = eb
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Returns (MlpParams, header dict)."""
    with np.load(path) as z:
        header = json.loads(bytes(z["header"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise DomainError(f"unsupported checkpoint version {header.get('version')!r}")
        n_layers = len(header["layer_sizes"]) - 1
        params = MlpParams(
            [z[f"w{i}"] for i in range(n_layers)],
            [z[f"b{i}"] for i in range(n_layers)],
            [z[f"ew{i}"] for i in range(n_layers)],
            [z[f"eb{i}"] for i in range(n_layers)],
        )
    return params, header


def gradient_check(params: MlpParams, batch: np.ndarray, sigma_a: float, seed: int,
                   h: float = 1e-5, n_probe: int = 40):
    """Worst relative gap between backprop and central finite differences.

    Probes ``n_probe`` entries spread across every weight/bias array.
    """
    loss0, grads = ardae_loss_and_grad(params, batch, sigma_a, seed)
    gws, gbs = grads
    worst = 0.0
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 13]))
    for arrays, grad_list in ((params.weights, gws), (params.biases, gbs)):
        for arr, g in zip(arrays, grad_list):
            flat = arr.reshape(-1)
            gflat = np.asarray(g).reshape(-1)
            for j in rng.choice(flat.size, size=min(n_probe, flat.size), replace=False):
                orig = flat[j]
                flat[j] = orig + h
                lp, _ = ardae_loss_and_grad(params, batch, sigma_a, seed)
                flat[j] = orig - h
                lm, _ = ardae_loss_and_grad(params, batch, sigma_a, seed)
                flat[j] = orig
                fd = (lp - lm) / (2 * h)
                denom = max(abs(fd), abs(gflat[j]), 1e-8)
                worst = max(worst, abs(fd - gflat[j]) / denom)
    return worst
