import copy
import os
from dataclasses import dataclass, field
from typing import List, Literal, Optional, Union

import numpy as np
import torch
from tqdm import tqdm

from dpersona import common
from dpersona.common import ConfigurationError, ContractViolation, NonFiniteLoss
from dpersona.dataset import MultiRaterDataset, iterate_batches
from dpersona.evaluation.metrics import ged, binarize
from dpersona.latentmath import kl_divergence, sample_reparameterized
from dpersona.losses import (LossWeights, bound_predictions, bound_targets, dice_loss, loss_bound,
                             loss_stage1)
from dpersona.model import ModelBundle, load_checkpoint, save_checkpoint

STAGE1_CHECKPOINT = "stage1.safetensors"


@dataclass
class Stage1Config:
    """
    Args:
        mode: "diverse" trains the full diversified objective. "single" trains a plain segmentation model on one
            label per image (KL and posterior off, decoding with the prior mean); used by every single-label baseline.
        label_source: tag recorded in logs and checkpoints ("multi", "mv", "rs", "staple", "rater-<i>").
    """
    epochs: int = 100
    learning_rate: float = 1e-4
    K: int = 10
    weights: LossWeights = field(default_factory=LossWeights)
    batch_size: int = 16
    seed: int = 0
    kl_direction: Literal["prior_to_post", "post_to_prior"] = "post_to_prior"
    sigma_floor: float = 1e-6
    val_samples: int = 10
    augment: bool = False
    mode: Literal["diverse", "single"] = "diverse"
    label_source: str = "multi"

    def __post_init__(self):
        if self.K < 2:
            raise ConfigurationError(f"stage1.K must be >= 2, got {self.K}")
        if self.epochs < 1:
            raise ConfigurationError(f"stage1.epochs must be >= 1, got {self.epochs}")
        if self.mode not in ("diverse", "single"):
            raise ConfigurationError(f"Unknown stage1 mode {self.mode}")

    @classmethod
    def from_dict(cls, d: dict, **overrides) -> 'Stage1Config':
        d = dict(d, **overrides)
        weights = LossWeights(alpha=d.pop('alpha', 1.0), beta=d.pop('beta', 0.5), l2=d.pop('l2', 1e-5))
        return cls(weights=weights, **d)


@dataclass
class Stage1Result:
    bundle: ModelBundle
    history: List[dict]
    best_epoch: int
    checkpoint_path: Optional[str] = None


def _batch_losses(bundle: ModelBundle, images, annotations, config: Stage1Config, gen: torch.Generator):
    """
    Returns (l_kl, l_seg, l_bound) averaged over the batch.
    """
    B, R = annotations.shape[:2]
    feats = bundle.features(images)
    prior = bundle.encode_prior(images)
    pick = torch.randint(R, (B,), generator=gen)
    target = annotations[torch.arange(B), pick]

    if config.mode == "single":
        zero = torch.zeros((), dtype=images.dtype)
        l_seg = dice_loss(torch.sigmoid(bundle.decode(feats, prior.mean)), target).mean()
        return zero, l_seg, zero

    posterior = bundle.encode_posterior(images, annotations)
    l_kl = kl_divergence(prior, posterior, config.kl_direction, config.sigma_floor).mean()

    # Random-annotation loss on one posterior sample
    z_post = sample_reparameterized(posterior, gen)
    l_seg = dice_loss(torch.sigmoid(bundle.decode(feats, z_post)), target).mean()

    # Bound loss on K fresh prior samples
    z_prior = sample_reparameterized(prior, gen, num_samples=config.K)
    preds = torch.sigmoid(bundle.decode(feats, z_prior))
    soft_inter, soft_union = bound_predictions(preds)
    l_bound = loss_bound(soft_inter, soft_union, bound_targets(annotations)).mean()
    return l_kl, l_seg, l_bound


def _objective_weights(config: Stage1Config) -> LossWeights:
    if config.mode == "single":
        return LossWeights(alpha=1.0, beta=0.0, l2=config.weights.l2)
    return config.weights


@torch.no_grad()
def validation_ged(bundle: ModelBundle, dataset: MultiRaterDataset, n_samples: int, seed: int,
                   batch_size: int = 16) -> float:
    """Mean GED over a split; single-label models are scored with their one prediction."""
    bundle.eval()
    scores = []
    for images, annotations, idx in iterate_batches(dataset, batch_size, shuffle=False):
        if bundle.mode == "single":
            preds = infer_single(bundle, images).unsqueeze(1)
        else:
            gen = common.make_generator(common.derive_seed(seed, "val", int(idx[0])))
            preds = infer_diverse(bundle, images, n_samples, gen)
        for p, a in zip(preds, annotations):
            scores.append(ged(binarize(p), a.numpy() > 0.5))
    return float(np.mean(scores))


def train_stage1(dataset: MultiRaterDataset, config: Stage1Config, model_cfg: dict,
                 out_dir: Optional[str] = None, logger: common.Logger = common.EmptyLogger(),
                 val_dataset: Optional[MultiRaterDataset] = None, config_hash: Optional[str] = None,
                 shape_hash: Optional[str] = None, checkpoint_name: str = STAGE1_CHECKPOINT) -> Stage1Result:
    """
    Trains the diversified model (or, with mode="single", a single-label model) and keeps the epoch with the
    lowest validation GED. Without a validation split the last epoch is kept.

    Per-epoch metric records: {epoch, l_kl, l_seg, l_bound, loss, val_ged}.
    """
    R = dataset.num_raters
    if config.mode == "diverse" and R < 2:
        raise ContractViolation(f"Diversified training needs at least two raters, dataset has R={R}")

    common.set_seed(config.seed)
    bundle = ModelBundle.from_config(model_cfg, R, mode=config.mode)
    weights = _objective_weights(config)
    optimizer = torch.optim.Adam(bundle.trainable_parameters(), lr=config.learning_rate,
                                 weight_decay=config.weights.l2)
    gen = common.make_generator(common.derive_seed(config.seed, "stage1", "noise"))
    rng = np.random.default_rng(common.derive_seed(config.seed, "stage1", "batches"))

    logger.log(f"Stage I ({config.mode}, labels={config.label_source}) on {dataset}: K={config.K}, "
               f"alpha={weights.alpha}, beta={weights.beta}, kl={config.kl_direction}")
    history, best_state, best_epoch, best_score = [], None, -1, float('inf')

    for epoch in tqdm(range(config.epochs), desc=f"stage1[{config.label_source}]", leave=False):
        bundle.train()
        sums = {'l_kl': 0.0, 'l_seg': 0.0, 'l_bound': 0.0, 'loss': 0.0}
        num_batches = 0
        for b, (images, annotations, _) in enumerate(
                iterate_batches(dataset, config.batch_size, rng, shuffle=True, augment=config.augment)):
            l_kl, l_seg, l_bound = _batch_losses(bundle, images, annotations, config, gen)
            loss = loss_stage1(l_kl, l_seg, l_bound, weights)
            if not torch.isfinite(loss):
                raise NonFiniteLoss(epoch, b, {'l_kl': float(l_kl), 'l_seg': float(l_seg),
                                               'l_bound': float(l_bound)})
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            for k, v in zip(sums, (l_kl, l_seg, l_bound, loss)):
                sums[k] += float(v.detach())
            num_batches += 1

        record = {'epoch': epoch, **{k: v / num_batches for k, v in sums.items()}, 'val_ged': None}
        if record['l_kl'] < 0:
            logger.log_check(f"Negative KL {record['l_kl']} at epoch {epoch}")
        if val_dataset is not None:
            record['val_ged'] = validation_ged(bundle, val_dataset, config.val_samples, config.seed,
                                               config.batch_size)
            if record['val_ged'] < best_score:
                best_score, best_epoch = record['val_ged'], epoch
                best_state = copy.deepcopy(bundle.state_dict())
        history.append(record)
        logger.log_metrics(record)
        logger.log(f"epoch {epoch}: " + ", ".join(f"{k}={v}" for k, v in record.items() if k != 'epoch'))

    if best_state is not None:
        bundle.load_state_dict(best_state)
    else:
        best_epoch = config.epochs - 1
    bundle.eval()
    logger.log(f"Selected epoch {best_epoch}")

    path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, checkpoint_name)
        save_checkpoint(bundle, path, stage="stage1", config_hash=config_hash, shape_hash=shape_hash,
                        extra={'best_epoch': best_epoch, 'label_source': config.label_source,
                               'beta': weights.beta, 'K': config.K})
        logger.log(f"Saved checkpoint to {path}")
    return Stage1Result(bundle, history, best_epoch, path)


def _as_bundle(checkpoint: Union[ModelBundle, str]) -> ModelBundle:
    if isinstance(checkpoint, str):
        return load_checkpoint(checkpoint)[0]
    return checkpoint


@torch.no_grad()
def infer_diverse(checkpoint: Union[ModelBundle, str], image: torch.Tensor, n_samples: int,
                  generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """
    Draws n_samples latent codes from the image-conditioned prior and decodes each of them.
    image: [B, 1, H, W] -> probability maps [B, n_samples, H, W]. Annotations are never consumed.
    """
    if n_samples < 1:
        raise ContractViolation(f"n_samples must be >= 1, got {n_samples}")
    bundle = _as_bundle(checkpoint)
    bundle.eval()
    feats = bundle.features(image)
    z = sample_reparameterized(bundle.encode_prior(image), generator, num_samples=n_samples, nested=True)
    return torch.sigmoid(bundle.decode(feats, z))


@torch.no_grad()
def infer_single(checkpoint: Union[ModelBundle, str], image: torch.Tensor) -> torch.Tensor:
    """Prediction decoded from the prior mean: [B, 1, H, W] -> [B, H, W]."""
    bundle = _as_bundle(checkpoint)
    bundle.eval()
    return torch.sigmoid(bundle.decode(bundle.features(image), bundle.encode_prior(image).mean))
