"""Sample generators for the source-free and data-free settings.

* :class:`FreshGenerator` maps Gaussian noise to images the source model
  classifies confidently and the masked model agrees on.
* :class:`MemoryPair` is an encoder plus a generator that doubles as the
  decoder; training it to reconstruct the pseudo-source batch makes the
  generator replay what the fresh generator produced earlier.
* :class:`DiversityGenerator` re-styles a batch by shifting per-channel
  statistics, producing neighbourhood domains around the pseudo-source.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn

from . import losses as L


class NonFiniteLoss(FloatingPointError):
    pass


def _check_finite(loss: torch.Tensor, what: str) -> None:
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"{what}: loss became {loss.item()}")


class FreshGenerator(nn.Module):
    """Noise -> image through two stride-2 transposed convolutions."""

    def __init__(self, noise_dim: int = 64, out_shape: Sequence[int] = (1, 28, 28), width: int = 64):
        super().__init__()
        c, h, w = out_shape
        if h % 4 or w % 4:
            raise ValueError(f"output size {h}×{w} must be divisible by 4")
        self.noise_dim = noise_dim
        self.out_shape = tuple(out_shape)
        self.h0, self.w0 = h // 4, w // 4
        self.fc = nn.Linear(noise_dim, width * self.h0 * self.w0)
        self.body = nn.Sequential(
            nn.BatchNorm2d(width),
            nn.ConvTranspose2d(width, width, 4, stride=2, padding=1),
            nn.BatchNorm2d(width), nn.LeakyReLU(0.2),
            nn.ConvTranspose2d(width, width // 2, 4, stride=2, padding=1),
            nn.BatchNorm2d(width // 2), nn.LeakyReLU(0.2),
            nn.Conv2d(width // 2, c, 3, padding=1),
            nn.Tanh(),
        )
        self.width = width

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        x = self.fc(z).view(len(z), self.width, self.h0, self.w0)
        return self.body(x)

    def noise(self, n: int, rng: torch.Generator) -> torch.Tensor:
        return torch.randn(n, self.noise_dim, generator=rng)


class Encoder(nn.Module):
    def __init__(self, noise_dim: int = 64, in_shape: Sequence[int] = (1, 28, 28)):
        super().__init__()
        c, h, w = in_shape
        self.net = nn.Sequential(
            nn.Conv2d(c, 32, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(32, 64, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Flatten(),
            nn.Linear(64 * (h // 4) * (w // 4), noise_dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class MemoryPair(nn.Module):
    """Memory generator and its encoder; the generator is also the decoder."""

    def __init__(self, noise_dim: int = 64, shape: Sequence[int] = (1, 28, 28)):
        super().__init__()
        self.generator = FreshGenerator(noise_dim, shape)
        self.encoder = Encoder(noise_dim, shape)
        self.noise_dim = noise_dim

    @property
    def decoder(self) -> FreshGenerator:
        return self.generator

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.generator(z)

    def reconstruct(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(x))

    def noise(self, n: int, rng: torch.Generator) -> torch.Tensor:
        return torch.randn(n, self.noise_dim, generator=rng)


@torch.no_grad()
def sample_fresh(g: FreshGenerator, n: int, seed: int) -> torch.Tensor:
    if n < 1:
        raise ValueError("n must be >= 1")
    return g(g.noise(n, torch.Generator().manual_seed(int(seed))))


@torch.no_grad()
def synthesize_pseudo_source(g_f: FreshGenerator, g_m: MemoryPair, n: int, seed: int) -> torch.Tensor:
    """n/2 fresh samples followed by n/2 memory samples."""
    if n < 2 or n % 2:
        raise ValueError(f"pseudo-source batch size must be even and >= 2, got {n}")
    rng = torch.Generator().manual_seed(int(seed))
    z_f = g_f.noise(n // 2, rng)
    z_m = g_m.noise(n // 2, rng)
    return torch.cat([g_f(z_f), g_m(z_m)])


@dataclass
class StepResult:
    loss: float
    batch: torch.Tensor


def train_fresh_step(g: FreshGenerator, opt: torch.optim.Optimizer, f_s, f_t, h: L.ProtectionHyperparams,
                     z: torch.Tensor) -> StepResult:
    """One update of the fresh generator on noise ``z``; models stay untouched."""
    g.train()
    x_f = g(z)
    p_s = L.to_probs(f_s(x_f), h.eps)
    p_t = L.to_probs(f_t(x_f), h.eps)
    loss = L.fresh_loss(p_s, p_t, h)
    _check_finite(loss, "fresh generator")
    opt.zero_grad(set_to_none=True)
    loss.backward(inputs=list(g.parameters()))
    opt.step()
    return StepResult(float(loss.detach()), x_f.detach())


def train_memory_step(g_m: MemoryPair, opt: torch.optim.Optimizer, f_s, x_syn: torch.Tensor,
                      layers_L: Sequence[int]) -> StepResult:
    """One autoencoder update of (encoder, generator) on the pseudo-source batch."""
    g_m.train()
    x_syn = x_syn.detach()
    x_re = g_m.reconstruct(x_syn)
    loss = L.memory_loss(x_syn, x_re, f_s, layers_L)
    _check_finite(loss, "memory generator")
    opt.zero_grad(set_to_none=True)
    loss.backward(inputs=list(g_m.parameters()))
    opt.step()
    return StepResult(float(loss.detach()), x_re.detach())


# --------------------------------------------------------------------------
# Diversity generator
# --------------------------------------------------------------------------

class DiversityGenerator(nn.Module):
    """Style shifter with a segmented convolutional trunk.

    ``out = mean(x) + (theta_sigma + s(x)) * (x - mean(x)) + theta_mu + m(x)``
    where the per-channel ``theta_mu``/``theta_sigma`` start at 0/1 and the
    trunk maps ``s``/``m`` come from a zero-initialised last convolution, so a
    fresh generator is the identity.
    """

    def __init__(self, channels: int = 1, hidden: int = 16, n_dir: int = 3):
        super().__init__()
        if n_dir < 1:
            raise ValueError("n_dir must be >= 1")
        self.channels = channels
        self.n_dir = n_dir
        self.theta_mu = nn.Parameter(torch.zeros(1, channels, 1, 1))
        self.theta_sigma = nn.Parameter(torch.ones(1, channels, 1, 1))
        self.trunk = nn.ModuleList([
            nn.Conv2d(channels, hidden, 3, padding=1),
            nn.Conv2d(hidden, hidden, 3, padding=1),
            nn.Conv2d(hidden, 2 * channels, 3, padding=1),
        ])
        nn.init.zeros_(self.trunk[-1].weight)
        nn.init.zeros_(self.trunk[-1].bias)
        self.act = nn.LeakyReLU(0.2)
        self.frozen = 0
        for conv in self.trunk:
            conv.weight.register_hook(self._grad_hook(conv))
            conv.bias.register_hook(self._grad_hook(conv))

    def segments(self, conv: nn.Conv2d) -> list[slice]:
        """Contiguous output-channel groups; the remainder goes to the last group."""
        n = conv.out_channels
        size = max(n // self.n_dir, 0)
        bounds = [i * size for i in range(self.n_dir)] + [n]
        return [slice(bounds[i], bounds[i + 1]) for i in range(self.n_dir)]

    def frozen_channels(self, conv: nn.Conv2d) -> slice:
        segs = self.segments(conv)
        return slice(0, segs[self.frozen].start) if self.frozen else slice(0, 0)

    def _grad_hook(self, conv):
        def hook(grad):
            sl = self.frozen_channels(conv)
            if sl.stop > 0:
                grad = grad.clone()
                grad[sl] = 0
            return grad
        return hook

    def snapshot_frozen(self) -> list[tuple[torch.Tensor, torch.Tensor]]:
        out = []
        for conv in self.trunk:
            sl = self.frozen_channels(conv)
            out.append((conv.weight.detach()[sl].clone(), conv.bias.detach()[sl].clone()))
        return out

    @torch.no_grad()
    def restore_frozen(self, snap) -> None:
        for conv, (w, b) in zip(self.trunk, snap):
            sl = self.frozen_channels(conv)
            conv.weight[sl] = w
            conv.bias[sl] = b

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = x
        for i, conv in enumerate(self.trunk):
            h = conv(h)
            if i < len(self.trunk) - 1:
                h = self.act(h)
        m_map, s_map = h[:, : self.channels], h[:, self.channels:]
        mu = x.mean(dim=(2, 3), keepdim=True)
        out = mu + (self.theta_sigma + s_map) * (x - mu) + self.theta_mu + m_map
        return out.clamp(-1, 1)


def freeze_direction(g: DiversityGenerator, d: int) -> None:
    """Disable gradient flow for the first ``d`` segments of every trunk layer."""
    if not 0 <= d < g.n_dir:
        raise ValueError(f"direction {d} out of range [0, {g.n_dir})")
    g.frozen = d


@dataclass
class NeighborhoodResult:
    samples: torch.Tensor
    labels: torch.Tensor
    mi: list[float]
    sem: list[float]


def generate_neighborhood(g: DiversityGenerator, opt: torch.optim.Optimizer, f_s, x: torch.Tensor,
                          y: torch.Tensor, h: L.ProtectionHyperparams) -> NeighborhoodResult:
    """One pass over all directions: generate, freeze, update on MI + semantic MMD.

    Returns the ``n_dir`` generated batches concatenated, with labels
    inherited from ``y``.
    """
    if len(x) == 0:
        raise ValueError("generate_neighborhood: empty batch")
    with torch.no_grad():
        z = f_s.features(x)
    z_by_class = L.group_by_label(z, y)
    batches, mis, sems = [], [], []
    for d in range(g.n_dir):
        x_g = g(x)
        freeze_direction(g, d)
        snap = g.snapshot_frozen()
        z_p = f_s.features(x_g)
        mi = L.mi_loss(z, z_p)
        sem = L.mmd_semantic_loss(z_by_class, L.group_by_label(z_p, y), h.sigma_mmd)
        loss = mi + sem
        _check_finite(loss, "diversity generator")
        opt.zero_grad(set_to_none=True)
        loss.backward(inputs=list(g.parameters()))
        opt.step()
        g.restore_frozen(snap)
        batches.append(x_g.detach())
        mis.append(float(mi.detach()))
        sems.append(float(sem.detach()))
    g.frozen = 0
    return NeighborhoodResult(torch.cat(batches), y.repeat(g.n_dir), mis, sems)
