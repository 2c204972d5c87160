"""
Networks of the two-stage model and checkpoint I/O.

Components of a ModelBundle:
    backbone          image [B,1,H,W] -> features [B,C,H,W] (small U-Net, C = channels[0])
    prior_net         image -> DiagonalGaussian(D)
    posterior_net     image concatenated with R annotations [B,1+R,H,W] -> DiagonalGaussian(D)
    head              broadcast latent [B,D,H,W] concatenated with features -> logits [B,H,W]
    projection_heads  R per-rater maps features -> [B,D,H,W] (empty until stage two)

All normalization is GroupNorm, so outputs do not depend on the batch composition.
"""
import json
import os
import math
from typing import Dict, Iterable, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from safetensors.torch import save_file, load_file, safe_open

from dpersona import common
from dpersona.common import ArtifactError, ContractViolation, FrozenParameterDrift
from dpersona.latentmath import DiagonalGaussian, LatentCode, broadcast_latent

COMPONENTS = ("backbone", "prior_net", "posterior_net", "head", "projection_heads")


def _norm(channels: int, groups: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(groups, channels), channels)


class ConvBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, groups: int = 4):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1),
            _norm(out_channels, groups),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, kernel_size=3, padding=1),
            _norm(out_channels, groups),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class UNetBackbone(nn.Module):
    """
    U-Net returning full-resolution features instead of logits.
    Decoder stages upsample to the skip connection's exact size, so any H, W >= 1 works.
    """
    def __init__(self, in_channels: int = 1, channels=(16, 32, 64), groups: int = 4):
        super().__init__()
        channels = list(channels)
        self.out_channels = channels[0]
        self.down = nn.ModuleList()
        prev = in_channels
        for ch in channels:
            self.down.append(ConvBlock(prev, ch, groups))
            prev = ch
        self.up = nn.ModuleList()
        for ch in reversed(channels[:-1]):
            self.up.append(ConvBlock(prev + ch, ch, groups))
            prev = ch

    def forward(self, x):
        skips = []
        for i, block in enumerate(self.down):
            if i > 0:
                x = F.max_pool2d(x, 2, ceil_mode=True)
            x = block(x)
            skips.append(x)
        skips.pop()
        for block in self.up:
            skip = skips.pop()
            x = F.interpolate(x, size=skip.shape[-2:], mode='nearest')
            x = block(torch.cat([x, skip], dim=1))
        return x


class GaussianEncoder(nn.Module):
    """
    Convolutional encoder, global average pooling and separate 1x1 heads for mean and log sigma.
    The log-sigma head starts at zero, so a fresh encoder outputs sigma = 1.
    """
    def __init__(self, in_channels: int, latent_dim: int, channels=(16, 32, 64), groups: int = 4):
        super().__init__()
        layers = []
        prev = in_channels
        for i, ch in enumerate(channels):
            if i > 0:
                layers.append(nn.MaxPool2d(2, ceil_mode=True))
            layers.append(ConvBlock(prev, ch, groups))
            prev = ch
        self.encoder = nn.Sequential(*layers)
        self.mu_head = nn.Conv2d(prev, latent_dim, kernel_size=1)
        self.log_sigma_head = nn.Conv2d(prev, latent_dim, kernel_size=1)
        nn.init.zeros_(self.log_sigma_head.weight)
        nn.init.zeros_(self.log_sigma_head.bias)

    def zero_init_heads(self):
        for layer in (self.mu_head, self.log_sigma_head):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)

    def forward(self, x) -> DiagonalGaussian:
        encoding = self.encoder(x).mean(dim=(2, 3), keepdim=True)
        mu = self.mu_head(encoding).flatten(1)
        log_sigma = self.log_sigma_head(encoding).flatten(1)
        return DiagonalGaussian(mu, log_sigma)


class PredictionHead(nn.Module):
    """
    Combines a tiled latent code with backbone features through 1x1 convolutions.
    """
    def __init__(self, feature_channels: int, latent_dim: int, hidden: int = 16):
        super().__init__()
        self.latent_dim = latent_dim
        self.combine = nn.Sequential(
            nn.Conv2d(feature_channels + latent_dim, hidden, kernel_size=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, hidden, kernel_size=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, 1, kernel_size=1),
        )

    def forward(self, z_map: torch.Tensor, features: torch.Tensor) -> torch.Tensor:
        return self.combine(torch.cat([features, z_map], dim=1)).squeeze(1)


class ProjectionHead(nn.Module):
    """Two 3x3 convolutions, C -> hidden -> D."""
    def __init__(self, feature_channels: int, latent_dim: int, hidden: Optional[int] = None):
        super().__init__()
        hidden = hidden or feature_channels
        self.net = nn.Sequential(
            nn.Conv2d(feature_channels, hidden, kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, latent_dim, kernel_size=3, padding=1),
        )

    def forward(self, features):
        return self.net(features)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


class ModelBundle(nn.Module):
    def __init__(self, latent_dim: int = 6, num_raters: int = 4, channels=(16, 32, 64),
                 encoder_channels=(16, 32, 64), head_channels: int = 16, proj_hidden: Optional[int] = None,
                 groups: int = 4, mode: str = "diverse"):
        super().__init__()
        if mode not in ("diverse", "single"):
            raise ContractViolation(f"Unknown model mode {mode}")
        self.latent_dim = latent_dim
        self.num_raters = num_raters
        self.mode = mode
        self.model_config = {
            "latent_dim": latent_dim, "channels": list(channels), "encoder_channels": list(encoder_channels),
            "head_channels": head_channels, "proj_hidden": proj_hidden, "groups": groups,
        }
        self.backbone = UNetBackbone(1, channels, groups)
        C = self.backbone.out_channels
        self.prior_net = GaussianEncoder(1, latent_dim, encoder_channels, groups)
        self.posterior_net = GaussianEncoder(1 + num_raters, latent_dim, encoder_channels, groups)
        self.head = PredictionHead(C, latent_dim, head_channels)
        self.projection_heads = nn.ModuleList()
        self.frozen_checksums: Dict[str, str] = {}

    @classmethod
    def from_config(cls, model_cfg: dict, num_raters: int, mode: str = "diverse") -> 'ModelBundle':
        return cls(num_raters=num_raters, mode=mode, **model_cfg)

    @property
    def feature_channels(self) -> int:
        return self.backbone.out_channels

    def _check_image(self, image: torch.Tensor):
        if image.dim() != 4 or image.shape[1] != 1:
            raise ContractViolation(f"image must be [B, 1, H, W], got {tuple(image.shape)}")

    def features(self, image: torch.Tensor) -> torch.Tensor:
        self._check_image(image)
        return self.backbone(image)

    def decode(self, features: torch.Tensor, z: LatentCode) -> torch.Tensor:
        """
        Logits for latent codes z [B, D] -> [B, H, W], or z [B, K, D] -> [B, K, H, W] sharing one feature map.
        """
        if z.shape[-1] != self.latent_dim:
            raise ContractViolation(f"latent dimension {z.shape[-1]} does not match the model's D={self.latent_dim}")
        B, C, H, W = features.shape
        if z.shape[0] != B:
            raise ContractViolation(f"{z.shape[0]} latent codes for a batch of {B}")
        if z.dim() == 3:
            K = z.shape[1]
            feats = features.unsqueeze(1).expand(B, K, C, H, W).reshape(B * K, C, H, W)
            logits = self.head(broadcast_latent(z.reshape(B * K, -1), H, W), feats)
            return logits.reshape(B, K, H, W)
        return self.head(broadcast_latent(z, H, W), features)

    def forward_diverse(self, image: torch.Tensor, z: LatentCode) -> torch.Tensor:
        return torch.sigmoid(self.decode(self.features(image), z))

    def encode_prior(self, image: torch.Tensor) -> DiagonalGaussian:
        self._check_image(image)
        return self.prior_net(image)

    def encode_posterior(self, image: torch.Tensor, annotations: torch.Tensor) -> DiagonalGaussian:
        self._check_image(image)
        if annotations.dim() != 4 or annotations.shape[1] != self.num_raters:
            raise ContractViolation(f"posterior expects {self.num_raters} annotations, got {tuple(annotations.shape)}")
        return self.posterior_net(torch.cat([image, annotations.to(image.dtype)], dim=1))

    def add_projection_heads(self, hidden: Optional[int] = None):
        hidden = hidden if hidden is not None else self.model_config['proj_hidden']
        self.model_config['proj_hidden'] = hidden
        self.projection_heads = nn.ModuleList(
            ProjectionHead(self.feature_channels, self.latent_dim, hidden) for _ in range(self.num_raters)
        )
        return self.projection_heads

    def component(self, name: str) -> nn.Module:
        if name not in COMPONENTS:
            raise ContractViolation(f"Unknown component {name}")
        return getattr(self, name)

    def checksums(self) -> Dict[str, str]:
        return {name: common.module_checksum(self.component(name)) for name in COMPONENTS}

    def freeze(self, names: Iterable[str]) -> Dict[str, str]:
        for name in names:
            module = self.component(name)
            for p in module.parameters():
                p.requires_grad_(False)
            self.frozen_checksums[name] = common.module_checksum(module)
        return dict(self.frozen_checksums)

    def assert_frozen(self, expected: Optional[Dict[str, str]] = None) -> Dict[str, str]:
        """
        Recomputes the checksums of frozen components and compares them with the values recorded at freeze
        time (or with `expected`). Raises FrozenParameterDrift naming the first component that changed.
        """
        expected = expected if expected is not None else self.frozen_checksums
        actual = {}
        for name, value in expected.items():
            actual[name] = common.module_checksum(self.component(name))
            if actual[name] != value:
                raise FrozenParameterDrift(name, value, actual[name])
        return actual

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def __repr__(self):
        return (f"ModelBundle(D={self.latent_dim}, R={self.num_raters}, mode={self.mode}, "
                f"heads={len(self.projection_heads)})")


def save_checkpoint(bundle: ModelBundle, path: str, stage: str, config_hash: Optional[str] = None,
                    shape_hash: Optional[str] = None, extra: Optional[dict] = None):
    """
    Checkpoint = safetensors file of the bundle's state dict. String metadata:
        format_version, stage, mode, latent_dim, num_raters, num_heads, model_config (JSON),
        config_hash, shape_hash, checksums (JSON, per component), extra (JSON)
    """
    state = {k: v.detach().cpu().contiguous() for k, v in bundle.state_dict().items()}
    metadata = {
        "format_version": common.FORMAT_VERSION,
        "stage": stage,
        "mode": bundle.mode,
        "latent_dim": str(bundle.latent_dim),
        "num_raters": str(bundle.num_raters),
        "num_heads": str(len(bundle.projection_heads)),
        "model_config": json.dumps(bundle.model_config, sort_keys=True),
        "config_hash": config_hash or "",
        "shape_hash": shape_hash or "",
        "checksums": json.dumps(bundle.checksums(), sort_keys=True),
        "extra": json.dumps(extra or {}, sort_keys=True),
    }
    save_file(state, path, metadata=metadata)


def read_checkpoint_metadata(path: str) -> dict:
    if not os.path.exists(path):
        raise ArtifactError(f"Missing checkpoint {path}")
    with safe_open(path, framework="pt") as f:
        meta = dict(f.metadata() or {})
    if meta.get("format_version") != common.FORMAT_VERSION:
        raise ArtifactError(f"Checkpoint {path} has format version {meta.get('format_version')}, "
                            f"expected {common.FORMAT_VERSION}")
    for key in ("model_config", "checksums", "extra"):
        meta[key] = json.loads(meta[key])
    for key in ("latent_dim", "num_raters", "num_heads"):
        meta[key] = int(meta[key])
    return meta


def load_checkpoint(path: str) -> Tuple[ModelBundle, dict]:
    meta = read_checkpoint_metadata(path)
    bundle = ModelBundle.from_config(meta['model_config'], meta['num_raters'], mode=meta['mode'])
    if meta['num_heads']:
        bundle.add_projection_heads()
    bundle.load_state_dict(load_file(path))
    checksums = bundle.checksums()
    if checksums != meta['checksums']:
        raise ArtifactError(f"Checkpoint {path} is corrupted: parameter checksums do not match its metadata")
    bundle.eval()
    return bundle, meta
