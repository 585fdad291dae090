"""Discrete-time noise schedules and the deterministic DDIM update."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray
    alphas_bar: np.ndarray
    inference_steps: np.ndarray
    kind: str = "linear"

    @property
    def T_train(self):
        return len(self.betas)

    @property
    def T_infer(self):
        return len(self.inference_steps)

    def alpha_bar(self, t):
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t >= self.T_train):
            raise DataError(f"timestep out of range [0, {self.T_train}): {t}")
        return self.alphas_bar[t]


def _linear_betas(T):
    # endpoints 1e-4..0.02 at T=1000, rescaled so shorter chains reach the same total noise
    scale = 1000.0 / T
    return np.minimum(np.linspace(scale * 1e-4, scale * 0.02, T, dtype=np.float64), 0.999)


def _cosine_betas(T, s=0.008, max_beta=0.999):
    f = lambda u: math.cos((u / T + s) / (1 + s) * math.pi / 2) ** 2
    return np.array([min(1 - f(i + 1) / f(i), max_beta) for i in range(T)], dtype=np.float64)


def build_schedule(T_train=1000, T_infer=200, kind="linear") -> NoiseSchedule:
    if not (1 <= T_infer <= T_train):
        raise ConfigError(f"need 1 <= T_infer <= T_train, got T_infer={T_infer}, T_train={T_train}")
    if kind == "linear":
        betas = _linear_betas(T_train)
    elif kind == "cosine":
        betas = _cosine_betas(T_train)
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}")
    if not np.all((betas > 0) & (betas < 1)):
        raise ConfigError(f"{kind} schedule with T_train={T_train} produces betas outside (0, 1)")
    alphas_bar = np.cumprod(1.0 - betas)
    # evenly strided, leading spacing: t = i * (T_train // T_infer)
    stride = T_train // T_infer
    steps = (np.arange(T_infer) * stride)[::-1].astype(np.int64)
    for arr in (betas, alphas_bar, steps):
        arr.setflags(write=False)
    return NoiseSchedule(betas, alphas_bar, steps, kind)


def forward_noise(schedule: NoiseSchedule, x0, t, eps):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps; ``t`` broadcasts over leading axes."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise DataError(f"noise shape {eps.shape} does not match data shape {x0.shape}")
    ab = schedule.alpha_bar(t)
    ab = np.reshape(ab, np.shape(ab) + (1,) * (x0.ndim - np.ndim(ab)))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def ddim_step(schedule: NoiseSchedule, x_t, x0_pred, t, t_prev):
    """Deterministic (eta = 0) DDIM move from ``t`` to ``t_prev`` given a clean-sample prediction.

    ``t_prev = -1`` denotes the clean endpoint (abar = 1), which returns ``x0_pred``.
    """
    if not t > t_prev:
        raise DataError(f"DDIM step requires t > t_prev, got t={t}, t_prev={t_prev}")
    ab_t = float(schedule.alpha_bar(t))
    ab_prev = 1.0 if t_prev < 0 else float(schedule.alpha_bar(t_prev))
    eps_hat = (x_t - math.sqrt(ab_t) * x0_pred) / math.sqrt(1.0 - ab_t)
    return math.sqrt(ab_prev) * x0_pred + math.sqrt(1.0 - ab_prev) * eps_hat


def ddim_pairs(schedule: NoiseSchedule):
    """(t, t_prev) pairs for the inference loop, ending at the clean endpoint -1."""
    steps = list(schedule.inference_steps)
    return list(zip(steps, steps[1:] + [-1]))


def ddim_sample(schedule: NoiseSchedule, x_T, predict_x0):
    """Run the full inference loop; ``predict_x0(x_t, t)`` supplies clean-sample estimates."""
    x = x_T
    for t, t_prev in ddim_pairs(schedule):
        x = ddim_step(schedule, x, predict_x0(x, t), t, t_prev)
    return x


def timestep_features(t, dim, max_period=10000.0):
    """Sinusoidal features [cos(t f_i), sin(t f_i)] with geometric frequencies."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / max(half, 1))
    args = t[:, None] * freqs[None, :]
    feats = np.concatenate([np.cos(args), np.sin(args)], axis=-1)
    if dim % 2:
        feats = np.concatenate([feats, np.zeros((len(t), 1))], axis=-1)
    return feats


def score_interpolation(probs, matrix, atol=1e-6):
    """Probability-weighted mean of (unit-norm) category embeddings.

    ``probs`` may carry leading batch axes; the last axis indexes categories.
    """
    probs = np.asarray(probs, dtype=np.float64)
    matrix = np.asarray(matrix)
    if probs.shape[-1] != matrix.shape[0]:
        raise DataError(f"{probs.shape[-1]} probabilities for {matrix.shape[0]} categories")
    if np.any(probs < -atol) or np.any(np.abs(probs.sum(axis=-1) - 1.0) > atol):
        raise DataError("probabilities must be nonnegative and sum to 1")
    return (probs @ matrix.astype(np.float64)).astype(matrix.dtype)
