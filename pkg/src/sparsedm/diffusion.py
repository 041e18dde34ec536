"""Toy 2-d denoising diffusion: schedules, datasets, and a masked-MLP noise predictor.

The forward process follows the standard variance-preserving discretization:
``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`` with a linear beta schedule.
Sampling runs the ancestral reverse chain with sigma_t = sqrt(beta_t) and no
noise on the final step.  The predictor is a small SiLU MLP over the point
concatenated with a sinusoidal time embedding; every linear layer is a
MaskedLinear so sparse masks apply uniformly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArchitectureError, ConfigError, DimensionError
from .sparsity import MaskedLinear, compress_2_4, masked_linear_forward, spmm
from .tensor import Tape, Tensor, mse_loss, silu

DATA_DIM = 2


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step beta with the derived alpha and cumulative alpha-bar arrays."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if not isinstance(T, int) or T < 1:
        raise ConfigError(f"schedule length must be a positive integer, got {T!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def _check_t(t, T: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64)
    if t.size and (t.min() < 0 or t.max() >= T):
        raise IndexError(f"timestep out of range [0, {T})")
    return t


def q_sample(x0: Tensor, t, eps: Tensor, sched: NoiseSchedule) -> Tensor:
    """Noising step: ``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``; t scalar or per-row."""
    if x0.shape != eps.shape:
        raise DimensionError(f"x0 {x0.shape} and eps {eps.shape} differ")
    t = _check_t(t, sched.T)
    ab = sched.alpha_bar[t]
    if ab.ndim:
        ab = ab[:, None]
    out = np.sqrt(ab) * x0.data.astype(np.float64) + np.sqrt(1.0 - ab) * eps.data.astype(np.float64)
    return Tensor(out)


def posterior_mean(x_t: Tensor, eps_hat: Tensor, t, sched: NoiseSchedule) -> Tensor:
    """Reverse-step mean ``(x_t - beta_t/sqrt(1-abar_t) eps_hat) / sqrt(alpha_t)``."""
    if x_t.shape != eps_hat.shape:
        raise DimensionError(f"x_t {x_t.shape} and eps_hat {eps_hat.shape} differ")
    t = _check_t(t, sched.T)
    beta = sched.beta[t]
    alpha = sched.alpha[t]
    ab = sched.alpha_bar[t]
    if np.ndim(beta):
        beta, alpha, ab = beta[:, None], alpha[:, None], ab[:, None]
    out = (x_t.data.astype(np.float64) - beta / np.sqrt(1.0 - ab) * eps_hat.data.astype(np.float64)) / np.sqrt(alpha)
    return Tensor(out)


# ---------------------------------------------------------------------------
# noise predictor
# ---------------------------------------------------------------------------

TEMB_DIM = 64


def time_embedding(t, T: int, dim: int = TEMB_DIM) -> np.ndarray:
    """Sinusoidal embedding of t/T over geometrically spaced frequencies."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, np.log(1000.0), half))
    ang = (t / T)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)


@dataclass
class NoisePredictor:
    """SiLU MLP predicting the noise from (x_t, time embedding)."""

    layers: list[MaskedLinear]
    temb_dim: int = TEMB_DIM

    @classmethod
    def create(
        cls,
        rng: np.random.Generator,
        hidden: tuple[int, ...] = (128, 128),
        data_dim: int = DATA_DIM,
        temb_dim: int = TEMB_DIM,
    ) -> "NoisePredictor":
        if not hidden or any(h < 32 or h % 32 for h in hidden):
            # every sweep group size up to 32 must divide the hidden widths
            raise ArchitectureError(f"hidden widths must be positive multiples of 32, got {hidden}")
        dims = [data_dim + temb_dim, *hidden, data_dim]
        layers = [
            MaskedLinear.dense(f"fc{i + 1}", dims[i], dims[i + 1], rng)
            for i in range(len(dims) - 1)
        ]
        return cls(layers=layers, temb_dim=temb_dim)

    @property
    def data_dim(self) -> int:
        return self.layers[-1].out_features

    @property
    def hidden(self) -> tuple[int, ...]:
        return tuple(layer.out_features for layer in self.layers[:-1])

    def forward(self, x: Tensor, t, n_steps: int, tape: Tape | None = None) -> Tensor:
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (x.shape[0],))
        temb = time_embedding(t, n_steps, self.temb_dim)
        h = Tensor(np.concatenate([x.data, temb], axis=1))
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            h = masked_linear_forward(h, layer, tape)
            if i != last:
                h = silu(h, tape)
        return h

    def copy(self) -> "NoisePredictor":
        return NoisePredictor(layers=[l.copy() for l in self.layers], temb_dim=self.temb_dim)


def inference_forward(model: NoisePredictor, n_steps: int, compressed: bool = False):
    """Build a fast tape-free forward closure; optionally run 2:4 layers via spmm.

    Effective weights (and compressed forms) are captured once, so the model
    must stay frozen for the lifetime of the closure.
    """
    plan = []
    for layer in model.layers:
        if compressed and layer.pattern is not None and (layer.pattern.n, layer.pattern.m) == (2, 4):
            comp = compress_2_4(Tensor(layer.effective_weight()), layer.mask)
            plan.append(("spmm", comp, layer.bias.data))
        else:
            plan.append(("dense", layer.effective_weight().astype(np.float64), layer.bias.data.astype(np.float64)))
    half = model.temb_dim // 2
    freqs = np.exp(np.linspace(0.0, np.log(1000.0), half))
    last = len(plan) - 1

    def fwd(x: np.ndarray, t) -> np.ndarray:
        tt = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
        ang = (tt / n_steps)[:, None] * freqs[None, :]
        temb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)
        h = np.concatenate([x.astype(np.float32), temb], axis=1)
        for i, step in enumerate(plan):
            if step[0] == "spmm":
                _, comp, bias = step
                h = spmm(comp, Tensor(h)).data + bias
            else:
                _, w64, b64 = step
                h = (h.astype(np.float64) @ w64.T + b64).astype(np.float32)
            if i != last:
                h = silu(Tensor(h)).data
        return h

    return fwd


def ddpm_sample(
    model: NoisePredictor,
    n: int,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    compressed: bool = False,
) -> Tensor:
    """Ancestral sampling from pure noise; deterministic given the generator state."""
    if n < 0:
        raise ConfigError(f"sample count must be >= 0, got {n}")
    if isinstance(model, NoisePredictor):
        fwd = inference_forward(model, sched.T, compressed)
        d = model.data_dim
    else:
        # duck-typed predictors (analytic oracles in tests) go through .forward
        def fwd(x, t):
            return model.forward(Tensor(x), t, sched.T).data

        d = getattr(model, "data_dim", DATA_DIM)
    x = rng.standard_normal((n, d)).astype(np.float32)
    for t in range(sched.T - 1, -1, -1):
        eps_hat = fwd(x, t)
        mu = posterior_mean(Tensor(x), Tensor(eps_hat), t, sched).data
        if t > 0:
            z = rng.standard_normal((n, d))
            x = (mu.astype(np.float64) + np.sqrt(sched.beta[t]) * z).astype(np.float32)
        else:
            x = mu
    return Tensor(x)


# ---------------------------------------------------------------------------
# toy datasets
# ---------------------------------------------------------------------------

DATASETS = ("gauss8", "swiss_roll", "checkerboard")

_G8_CENTERS = np.stack(
    [np.cos(2 * np.pi * np.arange(8) / 8), np.sin(2 * np.pi * np.arange(8) / 8)], axis=1
)
_G8_SIGMA = 0.1
# per-coordinate second moment of the mixture: 1/2 (ring) + sigma^2
_G8_SCALE = 1.0 / np.sqrt(0.5 + _G8_SIGMA**2)

# spiral phi in [1.5pi, 4.5pi]; means are analytic, stds frozen from 1e7 draws
_SWISS_MEAN = np.array([2.0, 2.0 / (3.0 * np.pi)])
_SWISS_STD = np.array([6.623712, 6.950436])

# checkerboard marginals are uniform on [-2, 2); std = sqrt(4/3)
_CHECKER_SCALE = 1.0 / np.sqrt(4.0 / 3.0)


@dataclass(frozen=True)
class ToyDataset:
    """Named 2-d toy distribution, normalized to zero mean and unit scale."""

    kind: str

    def __post_init__(self):
        if self.kind not in DATASETS:
            raise ConfigError(f"unknown dataset {self.kind!r}, choose from {DATASETS}")


def toy_batch(dataset: ToyDataset, n: int, rng: np.random.Generator) -> Tensor:
    """Draw n points; deterministic for a given generator state."""
    if n < 0:
        raise ConfigError(f"batch size must be >= 0, got {n}")
    if dataset.kind == "gauss8":
        idx = rng.integers(0, 8, size=n)
        pts = _G8_CENTERS[idx] + rng.normal(0.0, _G8_SIGMA, size=(n, 2))
        pts = pts * _G8_SCALE
    elif dataset.kind == "swiss_roll":
        phi = 1.5 * np.pi * (1.0 + 2.0 * rng.random(n))
        pts = np.stack([phi * np.cos(phi), phi * np.sin(phi)], axis=1)
        pts = (pts - _SWISS_MEAN) / _SWISS_STD
    else:  # checkerboard
        x1 = rng.random(n) * 4.0 - 2.0
        x2 = rng.random(n) - rng.integers(0, 2, size=n) * 2.0 + (np.floor(x1) % 2)
        pts = np.stack([x1, x2], axis=1) * _CHECKER_SCALE
    return Tensor(pts)


# ---------------------------------------------------------------------------
# training loss
# ---------------------------------------------------------------------------

def diffusion_loss(
    tape: Tape | None,
    model,
    batch: Tensor,
    sched: NoiseSchedule,
    rng: np.random.Generator,
) -> Tensor:
    """Noise-prediction MSE on the given tape; draws (t, eps) from the generator."""
    b = batch.shape[0]
    if b == 0:
        raise DimensionError("diffusion loss over an empty batch")
    t = rng.integers(0, sched.T, size=b)
    eps = Tensor(rng.standard_normal(batch.shape))
    x_t = q_sample(batch, t, eps, sched)
    pred = model.forward(x_t, t, sched.T, tape)
    return mse_loss(pred, eps, tape)


def loss_diff(model, batch: Tensor, sched: NoiseSchedule, rng: np.random.Generator):
    """One loss evaluation with gradients: returns (loss value, grads by parameter id)."""
    from .tensor import backward  # local import keeps module split tidy

    tape = Tape()
    loss = diffusion_loss(tape, model, batch, sched, rng)
    grads = backward(tape, loss)
    return float(loss.data), grads
