"""Synthetic data: mixture priors, clean images, noise injection, PSNR, file IO.

Everything takes an explicit integer seed and is a pure function of its
arguments.  Random streams are built on the counter-based Philox generator
keyed through ``SeedSequence([seed, *tags])`` so that independent purposes
(clean draw, noise draw, perturbation) never share a stream.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError
from .tweedie import EPS_Y, ModelKind, NoiseModel

PIECEWISE_CONSTANT = "piecewise_constant"
GMM_IID = "gmm_iid"


def rng_for(seed: int, *tags: int) -> np.random.Generator:
    """Deterministic Philox stream for (seed, tags)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, tags)])))


@dataclass(frozen=True)
class GmmPrior:
    """Finite Gaussian mixture over pixel intensities.

    weights sum to 1; means lie in (EPS_Y, 1]; stds positive.
    """

    weights: tuple
    means: tuple
    stds: tuple

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        m = np.asarray(self.means, dtype=np.float64)
        s = np.asarray(self.stds, dtype=np.float64)
        if not (w.shape == m.shape == s.shape) or w.ndim != 1 or w.size == 0:
            raise DomainError("weights/means/stds must be equal-length 1-D sequences")
        if abs(w.sum() - 1.0) > 1e-12:
            raise DomainError(f"weights sum to {w.sum()!r}, expected 1")
        if np.any(w < 0):
            raise DomainError("negative component weight")
        if np.any(m <= EPS_Y) or np.any(m > 1.0):
            raise DomainError(f"means must lie in ({EPS_Y}, 1]")
        if np.any(s <= 0):
            raise DomainError("stds must be positive")
        object.__setattr__(self, "weights", tuple(float(x) for x in w))
        object.__setattr__(self, "means", tuple(float(x) for x in m))
        object.__setattr__(self, "stds", tuple(float(x) for x in s))

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def mean(self) -> float:
        return float(np.dot(self.weights, self.means))

    def var(self) -> float:
        w = np.asarray(self.weights)
        m = np.asarray(self.means)
        s = np.asarray(self.stds)
        return float(np.dot(w, s**2 + m**2) - self.mean() ** 2)

    def to_dict(self) -> dict:
        return {"weights": list(self.weights), "means": list(self.means), "stds": list(self.stds)}

    @classmethod
    def from_dict(cls, d: dict) -> "GmmPrior":
        return cls(tuple(d["weights"]), tuple(d["means"]), tuple(d["stds"]))


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for one clean image."""

    kind: str
    height: int
    width: int
    prior: GmmPrior
    regions: int = 1  # piecewise-constant only
    seed: int = 0

    def __post_init__(self):
        if self.kind not in (PIECEWISE_CONSTANT, GMM_IID):
            raise DomainError(f"unknown synth kind {self.kind!r}")
        if self.height < 8 or self.width < 8:
            raise DomainError("height and width must be >= 8")
        if self.regions < 1:
            raise DomainError("region count must be >= 1")


# paper-scale level intervals per model, unit intensity scale
DEFAULT_RANGES = {
    ModelKind.GAUSSIAN: (5.0 / 255.0, 55.0 / 255.0),  # sigma
    ModelKind.POISSON: (0.005, 0.1),  # zeta
    ModelKind.GAMMA: (40.0, 120.0),  # k
}


@dataclass(frozen=True)
class NoiseRange:
    kind: ModelKind
    lo: float
    hi: float

    def __post_init__(self):
        if not (0 < self.lo <= self.hi):
            raise DomainError(f"need 0 < lo <= hi, got [{self.lo}, {self.hi}]")

    @classmethod
    def default(cls, kind) -> "NoiseRange":
        kind = ModelKind(kind)
        lo, hi = DEFAULT_RANGES[kind]
        return cls(kind, lo, hi)


def gen_clean(spec: SynthSpec) -> np.ndarray:
    """Deterministic clean image for the given spec.

    piecewise_constant: a grid of ceil(sqrt(regions))^2 axis-aligned cells,
    each filled with a prior mean drawn by the prior weights.  gmm_iid:
    every pixel i.i.d. from the prior, clamped to [EPS_Y, 1].
    """
    rng = rng_for(spec.seed, 0)
    H, W = spec.height, spec.width
    if spec.kind == GMM_IID:
        comp = rng.choice(spec.prior.n_components, size=(H, W), p=spec.prior.weights)
        x = np.asarray(spec.prior.means)[comp] + np.asarray(spec.prior.stds)[comp] * rng.standard_normal((H, W))
        return np.clip(x, EPS_Y, 1.0)
    g = math.isqrt(spec.regions - 1) + 1  # smallest g with g*g >= regions
    levels = rng.choice(np.asarray(spec.prior.means), size=(g, g), p=spec.prior.weights)
    ri = np.minimum(np.arange(H) * g // H, g - 1)
    ci = np.minimum(np.arange(W) * g // W, g - 1)
    return levels[np.ix_(ri, ci)].astype(np.float64)


def sample_noisy(x: np.ndarray, model: NoiseModel, seed: int) -> np.ndarray:
    """Draw y ~ p(y | x) for the given noise model; output clamped >= EPS_Y.

    Gaussian: y = x + sigma*n.  Poisson: y = zeta * Pois(x/zeta), so that
    Var[y|x] = zeta*x.  Gamma: y = x * Gamma(shape=k, rate=k), mean-one
    multiplicative with Var[y|x] = x^2/k.
    """
    model.validate()
    x = np.asarray(x, dtype=np.float64)
    rng = rng_for(seed, 1)
    kind = ModelKind(model.kind)
    if kind is ModelKind.GAUSSIAN:
        y = x + math.sqrt(model.level) * rng.standard_normal(x.shape)
    elif kind is ModelKind.POISSON:
        y = model.level * rng.poisson(x / model.level).astype(np.float64)
    elif kind is ModelKind.GAMMA:
        k = model.level
        y = x * rng.gamma(shape=k, scale=1.0 / k, size=x.shape)
    else:
        raise DomainError(f"no sampler for {kind}")
    return np.maximum(y, EPS_Y)


def clamp_rate(y_raw: np.ndarray) -> float:
    """Fraction of entries at or below the EPS_Y floor (post-clamp)."""
    y_raw = np.asarray(y_raw)
    return float(np.count_nonzero(y_raw <= EPS_Y) / y_raw.size)


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE) in dB; +inf when the images coincide."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DomainError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(peak * peak / mse)


# ---------------------------------------------------------------------------
# tensor files: little-endian f32 payload + JSON sidecar, plus P5 export


def save_tensor(path, arr: np.ndarray) -> None:
    path = Path(path)
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise DomainError(f"expected a 2-D tensor, got shape {arr.shape}")
    path.write_bytes(arr.astype("<f4").tobytes(order="C"))
    sidecar = {"dtype": "f32", "shape": [int(arr.shape[0]), int(arr.shape[1])]}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar))


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    if meta.get("dtype") != "f32":
        raise DomainError(f"unsupported dtype {meta.get('dtype')!r}")
    h, w = meta["shape"]
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    if raw.size != h * w:
        raise DomainError(f"payload holds {raw.size} floats, sidecar says {h}x{w}")
    return raw.reshape(h, w).astype(np.float64)


def save_pgm(path, arr: np.ndarray) -> None:
    """8-bit P5 graymap export, for eyeballing only."""
    arr = np.asarray(arr, dtype=np.float64)
    b = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + b.tobytes(order="C"))
