"""
Diagonal-Gaussian algebra over latent codes.

All functions accept a leading batch shape: a DiagonalGaussian holds mean/log_sigma of shape [..., D],
latent codes are [..., D] tensors and prior banks are [..., D, M] tensors.
"""
from dataclasses import dataclass
from typing import Literal, Optional

import torch
from einops import repeat
from torch.distributions import Independent, Normal
from torch.distributions import kl_divergence as _kl

from dpersona.common import ContractViolation

KLDirection = Literal["prior_to_post", "post_to_prior"]

# A latent code z is a tensor [..., D]
LatentCode = torch.Tensor


class DiagonalGaussian:
    """
    N(mean, diag(sigma^2)) parameterized by log sigma.
    """
    def __init__(self, mean: torch.Tensor, log_sigma: torch.Tensor):
        if mean.shape != log_sigma.shape:
            raise ContractViolation(f"mean {tuple(mean.shape)} and log_sigma {tuple(log_sigma.shape)} differ")
        self.mean = mean
        self.log_sigma = log_sigma

    @classmethod
    def from_sigma(cls, mean: torch.Tensor, sigma: torch.Tensor) -> 'DiagonalGaussian':
        return cls(mean, torch.log(sigma))

    @classmethod
    def standard(cls, dim: int, dtype=torch.float32) -> 'DiagonalGaussian':
        return cls(torch.zeros(dim, dtype=dtype), torch.zeros(dim, dtype=dtype))

    @property
    def sigma(self) -> torch.Tensor:
        return torch.exp(self.log_sigma)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def is_valid(self) -> bool:
        return bool(torch.isfinite(self.mean).all() and torch.isfinite(self.log_sigma).all())

    def distribution(self, sigma_floor: float = 0.0) -> Independent:
        sigma = self.sigma.clamp_min(sigma_floor) if sigma_floor > 0 else self.sigma
        return Independent(Normal(loc=self.mean, scale=sigma, validate_args=False), 1)

    def detach(self) -> 'DiagonalGaussian':
        return DiagonalGaussian(self.mean.detach(), self.log_sigma.detach())

    def __getitem__(self, idx) -> 'DiagonalGaussian':
        return DiagonalGaussian(self.mean[idx], self.log_sigma[idx])

    def __repr__(self):
        return f"DiagonalGaussian(D={self.dim}, batch={tuple(self.mean.shape[:-1])})"


@dataclass
class PriorBank:
    columns: torch.Tensor          # [..., D, M]
    source_seed: Optional[int] = None

    @property
    def size(self) -> int:
        return self.columns.shape[-1]


def kl_diagonal(p: DiagonalGaussian, q: DiagonalGaussian, sigma_floor: float = 0.0) -> torch.Tensor:
    """
    KL(p || q) in closed form, summed over the latent dimension.
    """
    if p.dim != q.dim:
        raise ContractViolation(f"KL between Gaussians of dimension {p.dim} and {q.dim}")
    return _kl(p.distribution(sigma_floor), q.distribution(sigma_floor))


def kl_divergence(prior: DiagonalGaussian, posterior: DiagonalGaussian,
                  direction: KLDirection = "post_to_prior", sigma_floor: float = 1e-6) -> torch.Tensor:
    """
    prior_to_post: KL(prior || posterior), the argument order written in the stage-one objective.
    post_to_prior: KL(posterior || prior), the conditional-VAE convention (default).
    """
    if direction == "prior_to_post":
        return kl_diagonal(prior, posterior, sigma_floor)
    if direction == "post_to_prior":
        return kl_diagonal(posterior, prior, sigma_floor)
    raise ContractViolation(f"Unknown KL direction {direction}")


def sample_reparameterized(g: DiagonalGaussian, generator: Optional[torch.Generator] = None,
                           num_samples: Optional[int] = None, nested: bool = False) -> LatentCode:
    """
    z = mean + sigma * eps with eps ~ N(0, I); gradients flow to mean and sigma.
    With num_samples, returns [..., num_samples, D]. With nested=True the noise is drawn one sample at a time,
    so the first n of a larger draw equal a draw of n from the same generator state.
    """
    mean, sigma = g.mean, g.sigma
    if num_samples is not None and nested:
        eps = torch.stack([torch.randn(mean.shape, generator=generator, dtype=mean.dtype, device=mean.device)
                           for _ in range(num_samples)], dim=-2)
        return mean.unsqueeze(-2) + sigma.unsqueeze(-2) * eps
    if num_samples is not None:
        mean = mean.unsqueeze(-2).expand(*mean.shape[:-1], num_samples, mean.shape[-1])
        sigma = sigma.unsqueeze(-2).expand_as(mean)
    eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype, device=mean.device)
    return mean + sigma * eps


def broadcast_latent(z: LatentCode, H: int, W: int) -> torch.Tensor:
    """
    Tiles [..., D] to [..., D, H, W] with output[..., d, h, w] = z[..., d].
    """
    if H < 1 or W < 1:
        raise ContractViolation(f"broadcast size must be positive, got {H}x{W}")
    return repeat(z, '... d -> ... d h w', h=H, w=W)


def sample_prior_bank(g: DiagonalGaussian, M: int, generator: Optional[torch.Generator] = None,
                      source_seed: Optional[int] = None) -> PriorBank:
    """
    M independent reparameterized draws stacked as the columns of a [..., D, M] bank.
    """
    if M < 1:
        raise ContractViolation(f"Prior bank size must be >= 1, got {M}")
    samples = sample_reparameterized(g, generator, num_samples=M)  # [..., M, D]
    return PriorBank(samples.transpose(-1, -2), source_seed)
