"""DDPM/DDIM machinery shared by the projection and image stages.

Timesteps run ``1..T``; ``t = 0`` denotes clean data with ``alpha_bar = 1``.
Schedule arrays are stored 0-based, so ``beta[t - 1]`` is the beta of step t.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

COSINE_OFFSET = 0.008
MAX_BETA = 0.999


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; every draw is a function of seed and position."""
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def abar(self, t: int) -> float:
        if not 0 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T}]")
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def alpha_at(self, t: int) -> float:
        return float(self.alpha[t - 1])

    def sigma_at(self, t: int) -> float:
        return float(self.sigma[t - 1])


def cosine_schedule(T: int, s: float = COSINE_OFFSET) -> NoiseSchedule:
    if T < 2:
        raise ValueError(f"cosine schedule needs T >= 2, got {T}")
    steps = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((steps / T + s) / (1.0 + s)) * math.pi / 2.0) ** 2
    raw = f / f[0]
    beta = np.minimum(1.0 - raw[1:] / raw[:-1], MAX_BETA)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    beta_tilde = (1.0 - prev) / (1.0 - alpha_bar) * beta
    beta_tilde[0] = beta[0]
    return NoiseSchedule(T, beta, alpha, alpha_bar, np.sqrt(beta_tilde))


def _match(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if np.shape(a) != np.shape(b):
        raise ValueError(f"{what} shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def q_sample(x0, t: int, eps, sched: NoiseSchedule):
    _match(x0, eps, "q_sample")
    ab = sched.abar(t)
    return math.sqrt(ab) * np.asarray(x0) + math.sqrt(1.0 - ab) * np.asarray(eps)


def predict_x0(x_t, t: int, eps_hat, sched: NoiseSchedule):
    _match(x_t, eps_hat, "predict_x0")
    ab = sched.abar(t)
    return (np.asarray(x_t) - math.sqrt(1.0 - ab) * np.asarray(eps_hat)) / math.sqrt(ab)


def ddpm_reverse_step(x_t, t: int, eps_hat, sched: NoiseSchedule, z):
    """Ancestral step ``x_t -> x_{t-1}`` with caller-supplied noise ``z``."""
    if t < 1:
        raise ValueError("ddpm_reverse_step needs t >= 1")
    _match(x_t, eps_hat, "ddpm_reverse_step")
    _match(x_t, z, "ddpm_reverse_step noise")
    a = sched.alpha_at(t)
    ab = sched.abar(t)
    mean = (np.asarray(x_t) - (1.0 - a) / math.sqrt(1.0 - ab) * np.asarray(eps_hat)) / math.sqrt(a)
    return mean + sched.sigma_at(t) * np.asarray(z)


def ddim_sigma(t: int, t_prev: int, sched: NoiseSchedule, eta: float) -> float:
    ab, ab_prev = sched.abar(t), sched.abar(t_prev)
    return eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab)) * math.sqrt(1.0 - ab / ab_prev)


def ddim_step(x_t, t: int, t_prev: int, eps_hat, sched: NoiseSchedule, eta: float = 0.0,
              z=None, rng: np.random.Generator | None = None, var=None):
    """Jump from ``t`` to ``t_prev`` along the DDIM family.

    ``eta = 0`` is deterministic; ``eta = 1`` with ``t_prev = t - 1`` matches
    the ancestral step. Noise comes from ``z`` or, if absent, from ``rng``
    (only when the step is stochastic). A denoiser-supplied variance ``var``
    replaces ``sigma^2`` for stochastic steps.
    """
    if not t_prev < t:
        raise ValueError(f"ddim_step needs t_prev < t, got {t_prev} >= {t}")
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    x0_hat = predict_x0(x_t, t, eps_hat, sched)
    ab_prev = sched.abar(t_prev)
    sig2 = ddim_sigma(t, t_prev, sched, eta) ** 2
    if var is not None and eta > 0:
        sig2 = np.minimum(eta * eta * np.asarray(var, dtype=float), 1.0 - ab_prev)
    out = math.sqrt(ab_prev) * x0_hat + np.sqrt(np.maximum(1.0 - ab_prev - sig2, 0.0)) * np.asarray(eps_hat)
    if eta > 0 and np.any(sig2 > 0):
        if z is None:
            if rng is None:
                raise ValueError("stochastic ddim_step needs z or rng")
            z = rng.standard_normal(np.shape(x_t))
        out = out + np.sqrt(sig2) * np.asarray(z)
    return out


def timestep_subsequence(T: int, n_steps: int) -> list:
    """``n_steps`` descending timesteps evenly spread over ``[1, T]``; the
    sampler hops from the last one to 0."""
    if not 1 <= n_steps <= T:
        raise ValueError(f"need 1 <= n_steps <= T, got n_steps={n_steps}, T={T}")
    return [T - (i * T) // n_steps for i in range(n_steps)]


def noise_mse_loss(eps_true, eps_hat) -> float:
    _match(eps_true, eps_hat, "noise_mse_loss")
    d = np.asarray(eps_true, dtype=float) - np.asarray(eps_hat, dtype=float)
    return float(np.mean(d * d))


class DenoiserError(RuntimeError):
    pass


def sample(denoiser, condition, shape, sched: NoiseSchedule, n_steps: int = 50,
           eta: float = 0.0, seed: int = 0, trace: list | None = None) -> np.ndarray:
    """Reverse diffusion from ``N(0, I)`` to an ``x_0`` estimate of ``shape``.

    ``denoiser(x_t, t, alpha_bar_t, condition)`` returns a
    :class:`~lagicd.denoisers.Prediction`. When ``trace`` is a list, each
    step appends ``{"t": t, "losses": ...}`` with any residuals the denoiser
    reported.
    """
    rng = make_rng(seed)
    x = rng.standard_normal(tuple(shape))
    steps = timestep_subsequence(sched.T, n_steps)
    for i, t in enumerate(steps):
        t_prev = steps[i + 1] if i + 1 < len(steps) else 0
        pred = denoiser(x, t, sched.abar(t), condition)
        eps = np.asarray(pred.eps, dtype=float)
        if eps.shape != x.shape:
            raise DenoiserError(f"denoiser returned shape {eps.shape}, expected {x.shape}")
        if not np.all(np.isfinite(eps)):
            raise DenoiserError(f"denoiser returned non-finite noise at t={t}")
        x = ddim_step(x, t, t_prev, eps, sched, eta, rng=rng, var=pred.var)
        if trace is not None:
            trace.append({"t": t, "losses": pred.losses})
    return x
