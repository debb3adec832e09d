"""Euler integration of the learned velocity field, slice by slice.

Each slice starts from its own Gaussian noise draw. With autoregressive
conditioning on, the synthesized slice ``i - 1`` is fed back as the
previous-slice channel for slice ``i``; slice 0 always sees zeros.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, DataError, NumericError
from .volume import Volume

NOISE_MODES = ("fresh_per_slice", "shared_across_slices")


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 1
    ar_enabled: bool = True
    seed: int = 0
    noise_mode: str = "fresh_per_slice"

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.noise_mode not in NOISE_MODES:
            raise ConfigError(f"noise_mode must be one of {NOISE_MODES}, got {self.noise_mode!r}")


def euler_integrate(velocity, x_c, x_ar, steps: int, rng: np.random.Generator | None = None, x0=None):
    """Forward-Euler solve of ``dx/dt = velocity(x, x_c, x_ar, t)`` on [0, 1].

    The field is evaluated at the left node ``t_k = k / steps``. ``x0``
    defaults to a standard-normal draw from ``rng`` shaped like ``x_c``.
    """
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    x_c = torch.as_tensor(x_c)
    x_ar = torch.as_tensor(x_ar)
    if x_c.shape != x_ar.shape:
        raise DataError(f"conditioning shapes differ: {tuple(x_c.shape)} vs {tuple(x_ar.shape)}")
    if x0 is None:
        if rng is None:
            raise DataError("either rng or x0 is required")
        x0 = torch.from_numpy(rng.standard_normal(tuple(x_c.shape))).to(x_c.dtype)
    x = torch.as_tensor(x0).clone()
    dt = 1.0 / steps
    for k in range(steps):
        t = torch.full((x.shape[0],) if x.ndim == 4 else (), k * dt, dtype=x.dtype)
        x = x + dt * velocity(x, x_c, x_ar, t)
        if not torch.all(torch.isfinite(x)):
            raise NumericError(f"non-finite state after Euler step {k + 1}/{steps}")
    return x


def slice_noise(seed: int, index: int, shape, noise_mode: str = "fresh_per_slice") -> np.ndarray:
    key = [seed] if noise_mode == "shared_across_slices" else [seed, index]
    return np.random.default_rng(key).standard_normal(shape)


def synthesize_volume(net, source: Volume, config: SamplerConfig = SamplerConfig(),
                      model_kind: str = "flow_matching") -> Volume:
    """Synthesize the target contrast for every slice of ``source``.

    ``source`` must already be normalized. Slices are processed in ascending
    index order; the network is only read. Baseline generators
    (``unet_mse``, ``pix2pix``) predict each slice directly from a zero
    state with the time embedding disabled; the AR feedback is the same.
    """
    direct = model_kind != "flow_matching"
    h, w, n = source.shape
    src = torch.from_numpy(np.ascontiguousarray(source.voxels, dtype=np.float32))
    out = np.empty((h, w, n), dtype=np.float32)
    prev = torch.zeros(1, 1, h, w)
    was_training = getattr(net, "training", False)
    if hasattr(net, "eval"):
        net.eval()
    try:
        with torch.no_grad():
            for i in range(n):
                x_c = src[:, :, i][None, None]
                x_ar = prev if (config.ar_enabled and i > 0) else torch.zeros_like(x_c)
                if direct:
                    x1 = net(torch.zeros_like(x_c), x_c, x_ar, torch.zeros(1), zero_time=True)
                    if not torch.all(torch.isfinite(x1)):
                        raise NumericError(f"non-finite prediction at slice {i}")
                else:
                    x0 = torch.from_numpy(slice_noise(config.seed, i, (1, 1, h, w), config.noise_mode)).float()
                    x1 = euler_integrate(net, x_c, x_ar, config.steps, x0=x0)
                out[:, :, i] = x1[0, 0].numpy()
                prev = x1
    finally:
        if was_training:
            net.train()
    return source.with_voxels(out)
