"""Flow-matching and baseline objectives, and the training loop.

Slices of each training volume become samples ``(x1, xc, xar)``: the
target slice, the (augmented) source slice, and the ground-truth target
slice one index below (zeros for the first slice). Previous-slice
conditioning is always teacher-forced from the ground truth.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .artifacts import AugmentPolicy, augment
from .errors import ConfigError, DataError, NumericError
from .nets import DiscConfig, NetConfig, PatchDiscriminator, init_discriminator, init_network, patchgan_forward
from .volume import random_crop_offsets

log = logging.getLogger(__name__)

MODEL_KINDS = ("flow_matching", "unet_mse", "pix2pix")
# smallest input the three stride-2 PatchGAN layers plus two 4x4 convs accept
PATCHGAN_MIN_SIZE = 24


@dataclass(frozen=True)
class TrainConfig:
    model_kind: str = "flow_matching"
    epochs: int = 20
    batch_size: int = 16
    lr_generator: float = 3e-5
    lr_discriminator: float = 1e-5
    sigma_pert: float = 0.0
    ar_dropout: float = 0.0
    crop_size: int = 48
    seed: int = 0
    disc_warmup_epochs: int = 10
    lambda_adv: float = 0.01
    replicas: int = 1
    augment: bool = True

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise ConfigError(f"model_kind must be one of {MODEL_KINDS}, got {self.model_kind!r}")
        if self.lr_generator <= 0 or self.lr_discriminator <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.sigma_pert < 0:
            raise ConfigError("sigma_pert must be >= 0")
        if not 0.0 <= self.ar_dropout <= 1.0:
            raise ConfigError("ar_dropout must lie in [0, 1]")
        if self.epochs < 0 or self.batch_size < 1 or self.crop_size < 1 or self.replicas < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1, crop_size >= 1 and replicas >= 1 required")
        if self.model_kind == "pix2pix" and self.crop_size < PATCHGAN_MIN_SIZE:
            raise ConfigError(f"pix2pix needs crop_size >= {PATCHGAN_MIN_SIZE} for the PatchGAN, got {self.crop_size}")


@dataclass
class LossReport:
    epoch: int
    mean_train_loss: float
    mean_val_loss: float
    wall_seconds: float

    CSV_HEADER = "epoch,mean_train_loss,mean_val_loss,wall_seconds"

    def csv_row(self) -> str:
        return f"{self.epoch},{self.mean_train_loss!r},{self.mean_val_loss!r},{self.wall_seconds:.3f}"


@dataclass
class TrainSample:
    x1: np.ndarray
    xc: np.ndarray
    xar: np.ndarray

    def __post_init__(self):
        if not (self.x1.shape == self.xc.shape == self.xar.shape):
            raise DataError("sample slices must share one shape")


class Batch(NamedTuple):
    x1: torch.Tensor
    xc: torch.Tensor
    xar: torch.Tensor

    def __len__(self):
        return self.x1.shape[0]

    def shard(self, lo: int, hi: int) -> "Batch":
        return Batch(self.x1[lo:hi], self.xc[lo:hi], self.xar[lo:hi])


def collate(samples: Sequence[TrainSample]) -> Batch:
    def stack(name):
        return torch.from_numpy(np.stack([getattr(s, name) for s in samples])[:, None].astype(np.float32))
    return Batch(stack("x1"), stack("xc"), stack("xar"))


# -- flow-matching algebra ---------------------------------------------------

def interpolate(x0, x1, t, sigma_pert: float = 0.0, noise=None):
    """``(1 - t) x0 + t x1 + sigma_pert * noise``; ``t`` broadcasts per sample."""
    if x0.shape != x1.shape:
        raise DataError(f"shape mismatch: {tuple(x0.shape)} vs {tuple(x1.shape)}")
    t = torch.as_tensor(t, dtype=x1.dtype)
    if torch.any((t < 0) | (t > 1)):
        raise DataError("t must lie in [0, 1]")
    if t.ndim == 1:
        t = t.reshape(-1, *([1] * (x1.ndim - 1)))
    xt = (1 - t) * x0 + t * x1
    if sigma_pert > 0:
        if noise is None:
            noise = torch.randn_like(x1)
        xt = xt + sigma_pert * noise
    return xt


def target_velocity(x0, x1):
    if x0.shape != x1.shape:
        raise DataError(f"shape mismatch: {tuple(x0.shape)} vs {tuple(x1.shape)}")
    return x1 - x0


class FlowNoise(NamedTuple):
    x0: torch.Tensor
    t: torch.Tensor
    eps: torch.Tensor | None

    def shard(self, lo, hi):
        return FlowNoise(self.x0[lo:hi], self.t[lo:hi], None if self.eps is None else self.eps[lo:hi])


def draw_flow_noise(x1: torch.Tensor, generator: torch.Generator | None, sigma_pert: float = 0.0) -> FlowNoise:
    """Standard-normal ``x0`` and ``t ~ U[0, 1)`` per sample, drawn in that order."""
    x0 = torch.randn(x1.shape, generator=generator, dtype=x1.dtype)
    t = torch.rand(x1.shape[0], generator=generator, dtype=x1.dtype)
    eps = torch.randn(x1.shape, generator=generator, dtype=x1.dtype) if sigma_pert > 0 else None
    return FlowNoise(x0, t, eps)


def fm_loss(net, batch: Batch, generator: torch.Generator | None = None, sigma_pert: float = 0.0,
            noise: FlowNoise | None = None):
    """Mean squared error between predicted and straight-path velocity.

    ``net`` is any callable ``(x_t, x_c, x_ar, t) -> velocity``.
    """
    if noise is None:
        noise = draw_flow_noise(batch.x1, generator, sigma_pert)
    xt = interpolate(noise.x0, batch.x1, noise.t, sigma_pert, noise.eps)
    pred = net(xt, batch.xc, batch.xar, noise.t)
    return torch.mean((pred - target_velocity(noise.x0, batch.x1)) ** 2)


def regression_output(net, batch: Batch, t=0.0):
    # t is ignored by a zero-time network; passed so the invariance is testable
    b = len(batch)
    t = torch.full((b,), float(t), dtype=batch.x1.dtype)
    return net(torch.zeros_like(batch.x1), batch.xc, batch.xar, t, zero_time=True)


def unet_regression_loss(net, batch: Batch, t=0.0):
    """Pixel MSE of a zero-time, zero-state forward pass against the target."""
    return F.mse_loss(regression_output(net, batch, t), batch.x1)


def pix2pix_losses(gen, disc: PatchDiscriminator, batch: Batch, epoch: int, warmup_epochs: int = 10,
                   lambda_adv: float = 0.01):
    """Generator loss and (after warm-up) discriminator loss.

    Returns ``(g_loss, d_loss)``; ``d_loss`` is None while
    ``epoch < warmup_epochs``, when the generator sees MSE only.
    """
    fake = regression_output(gen, batch)
    mse = F.mse_loss(fake, batch.x1)
    if epoch < warmup_epochs:
        return mse, None
    logits_fake = patchgan_forward(disc, batch.xc, fake)
    adv = F.binary_cross_entropy_with_logits(logits_fake, torch.ones_like(logits_fake))
    g_loss = mse + lambda_adv * adv
    logits_real = patchgan_forward(disc, batch.xc, batch.x1)
    logits_det = patchgan_forward(disc, batch.xc, fake.detach())
    d_loss = 0.5 * (
        F.binary_cross_entropy_with_logits(logits_real, torch.ones_like(logits_real))
        + F.binary_cross_entropy_with_logits(logits_det, torch.zeros_like(logits_det))
    )
    return g_loss, d_loss


# -- data --------------------------------------------------------------------

class SliceDataset:
    """Teacher-forced slice samples drawn from paired volumes."""

    def __init__(self, pairs, crop_size: int | None = None, policy: AugmentPolicy | None = None,
                 ar_dropout: float = 0.0):
        if len(pairs) == 0:
            raise DataError("training dataset is empty")
        self.sources = [np.asarray(p.source.voxels, dtype=np.float32) for p in pairs]
        self.targets = [np.asarray(p.target.voxels, dtype=np.float32) for p in pairs]
        for s, t in zip(self.sources, self.targets):
            if s.shape != t.shape:
                raise DataError(f"source/target shapes differ: {s.shape} vs {t.shape}")
        self.index = [(v, i) for v, src in enumerate(self.sources) for i in range(src.shape[2])]
        self.crop_size = crop_size
        self.policy = policy
        self.ar_dropout = ar_dropout

    def __len__(self):
        return len(self.index)

    def sample(self, k: int, rng: np.random.Generator | None = None) -> TrainSample:
        v, i = self.index[k]
        src, tgt = self.sources[v], self.targets[v]
        x1 = tgt[:, :, i]
        xc = src[:, :, i]
        xar = tgt[:, :, i - 1] if i > 0 else np.zeros_like(x1)
        if rng is not None:
            drop = rng.random() < self.ar_dropout
            if drop:
                xar = np.zeros_like(x1)
            if self.crop_size is not None and self.crop_size < min(x1.shape):
                oy, ox = random_crop_offsets(x1.shape, (self.crop_size, self.crop_size), rng)
                window = (slice(oy, oy + self.crop_size), slice(ox, ox + self.crop_size))
                x1, xc, xar = x1[window], xc[window], xar[window]
            if self.policy is not None:
                xc = augment(xc, self.policy, rng).astype(np.float32)
        return TrainSample(x1.copy(), xc.copy(), xar.copy())

    def batches(self, batch_size: int, rng: np.random.Generator):
        order = rng.permutation(len(self))
        for lo in range(0, len(order), batch_size):
            yield collate([self.sample(int(k), rng) for k in order[lo:lo + batch_size]])


# -- training loop -------------------------------------------------------------

def _seeds(seed: int):
    data_ss, noise_ss, init_ss, val_ss = np.random.SeedSequence(seed).spawn(4)
    def as_int(ss):
        return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
    return np.random.default_rng(data_ss), as_int(noise_ss), as_int(init_ss), as_int(val_ss)


def _check_finite(loss: torch.Tensor, epoch: int, step: int, what: str = "loss"):
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite {what} {loss.item()} at epoch {epoch}, step {step}")


def _accumulate(loss_fn: Callable[[int, int], torch.Tensor], n: int, replicas: int) -> torch.Tensor:
    """Backward ``loss_fn`` over ``replicas`` contiguous shards, averaging gradients.

    Each shard's loss is weighted by its share of the batch, so the summed
    gradient equals the full-batch mean-loss gradient.
    """
    bounds = np.linspace(0, n, min(replicas, n) + 1).round().astype(int)
    total = None
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        part = loss_fn(lo, hi) * ((hi - lo) / n)
        part.backward()
        total = part.detach() if total is None else total + part.detach()
    return total


def evaluate_loss(net, kind: str, dataset: SliceDataset, seed: int, batch_size: int = 32,
                  sigma_pert: float = 0.0, max_samples: int | None = None) -> float:
    """Mean objective over ``dataset`` without augmentation, using a fixed noise stream."""
    gen = torch.Generator().manual_seed(seed)
    n = len(dataset) if max_samples is None else min(len(dataset), max_samples)
    total, count = 0.0, 0
    was_training = net.training
    net.eval()
    with torch.no_grad():
        for lo in range(0, n, batch_size):
            batch = collate([dataset.sample(k) for k in range(lo, min(lo + batch_size, n))])
            if kind == "flow_matching":
                loss = fm_loss(net, batch, gen, sigma_pert)
            else:
                loss = unet_regression_loss(net, batch)
            total += float(loss) * len(batch)
            count += len(batch)
    net.train(was_training)
    return total / count


def train(config: TrainConfig, pairs, net_config: NetConfig = NetConfig(), *, val_pairs=None,
          policy: AugmentPolicy | None = None, disc_config: DiscConfig = DiscConfig(),
          max_steps: int | None = None, on_epoch_end=None, on_step=None):
    """Train a velocity network (or a baseline generator) on paired volumes.

    Parameters
    ----------
    pairs : sequence of objects with ``.source`` / ``.target`` Volumes
    val_pairs : optional held-out pairs for ``mean_val_loss``; without them
        the loss is monitored on up to 64 training slices.
    policy : augmentation for the conditioning channel; defaults to
        ``AugmentPolicy()`` when ``config.augment`` is set.
    max_steps : stop after this many optimizer steps (the epoch in progress
        is reported as partial).
    on_epoch_end : ``callback(epoch, model, discriminator)`` after each epoch.
    on_step : ``callback(step, loss)`` after each optimizer step.

    Returns
    -------
    (model, reports)
    """
    if config.augment and policy is None:
        policy = AugmentPolicy()
    if not config.augment:
        policy = None
    data = SliceDataset(pairs, config.crop_size, policy, config.ar_dropout)
    monitor = SliceDataset(val_pairs) if val_pairs else SliceDataset(pairs)
    monitor_max = None if val_pairs else 64

    rng, noise_seed, init_seed, val_seed = _seeds(config.seed)
    gen = torch.Generator().manual_seed(noise_seed)
    model = init_network(net_config, init_seed)
    model.train()
    opt_g = torch.optim.Adam(model.parameters(), lr=config.lr_generator, betas=(0.9, 0.999))
    disc = opt_d = None
    if config.model_kind == "pix2pix":
        disc = init_discriminator(disc_config, init_seed + 1)
        disc.train()
        opt_d = torch.optim.Adam(disc.parameters(), lr=config.lr_discriminator, betas=(0.9, 0.999))

    reports: list[LossReport] = []
    step = 0
    start = time.perf_counter()
    for epoch in range(config.epochs):
        losses = []
        for batch in data.batches(config.batch_size, rng):
            n = len(batch)
            opt_g.zero_grad(set_to_none=True)
            if config.model_kind == "flow_matching":
                noise = draw_flow_noise(batch.x1, gen, config.sigma_pert)
                loss = _accumulate(
                    lambda lo, hi: fm_loss(model, batch.shard(lo, hi), sigma_pert=config.sigma_pert,
                                           noise=noise.shard(lo, hi)),
                    n, config.replicas)
                _check_finite(loss, epoch, step)
                opt_g.step()
            elif config.model_kind == "unet_mse":
                loss = _accumulate(lambda lo, hi: unet_regression_loss(model, batch.shard(lo, hi)),
                                   n, config.replicas)
                _check_finite(loss, epoch, step)
                opt_g.step()
            else:
                d_parts = []

                def g_part(lo, hi):
                    g, d = pix2pix_losses(model, disc, batch.shard(lo, hi), epoch,
                                          config.disc_warmup_epochs, config.lambda_adv)
                    if d is not None:
                        d_parts.append((d, (hi - lo) / n))
                    return g

                loss = _accumulate(g_part, n, config.replicas)
                _check_finite(loss, epoch, step)
                opt_g.step()
                if d_parts:
                    # generator backward also deposited gradients on the discriminator
                    opt_d.zero_grad(set_to_none=True)
                    d_loss = sum(d * w for d, w in d_parts)
                    _check_finite(d_loss.detach(), epoch, step, "discriminator loss")
                    d_loss.backward()
                    opt_d.step()
            losses.append(float(loss))
            step += 1
            if on_step is not None:
                on_step(step, float(loss))
            if max_steps is not None and step >= max_steps:
                break
        val = evaluate_loss(model, config.model_kind, monitor, val_seed, sigma_pert=config.sigma_pert,
                            max_samples=monitor_max)
        model.train()
        report = LossReport(epoch + 1, float(np.mean(losses)), val, time.perf_counter() - start)
        reports.append(report)
        log.info("epoch %d train %.5f val %.5f", report.epoch, report.mean_train_loss, report.mean_val_loss)
        if on_epoch_end is not None:
            on_epoch_end(epoch, model, disc)
        if max_steps is not None and step >= max_steps:
            break
    model.eval()
    return model, reports
