"""
Personalization on top of a frozen stage-one model.

For rater i, a projection head maps backbone features to a D-channel map whose spatial mean is the expert prompt.
The prompt queries a bank of M latent codes drawn from the frozen prior of the same image; the attention output
(a convex combination of bank columns) is decoded by the frozen prediction head.
"""
import copy
import hashlib
import math
import os
from dataclasses import dataclass
from typing import List, Literal, Optional, Tuple, Union

import numpy as np
import torch
from einops import einsum
from tqdm import tqdm

from dpersona import common
from dpersona.common import ArtifactError, ConfigurationError, ContractViolation, NonFiniteLoss
from dpersona.config import shape_hash as compute_shape_hash
from dpersona.dataset import MultiRaterDataset, iterate_batches
from dpersona.evaluation.metrics import per_rater_dice
from dpersona.latentmath import DiagonalGaussian, LatentCode, PriorBank, sample_prior_bank
from dpersona.losses import loss_stage2
from dpersona.model import ModelBundle, load_checkpoint, save_checkpoint

STAGE2_CHECKPOINT = "stage2.safetensors"
FROZEN = ("backbone", "prior_net", "posterior_net", "head")


@dataclass
class Stage2Config:
    epochs: int = 200
    learning_rate: float = 1e-4
    M: int = 100
    seed: int = 0
    bank_policy: Literal["resample_per_forward", "fixed_per_image"] = "resample_per_forward"
    eval_bank_seed: int = 1234
    attention_scale: bool = False
    batch_size: int = 16
    l2: float = 1e-5

    def __post_init__(self):
        if self.M < 1:
            raise ConfigurationError(f"stage2.M must be >= 1, got {self.M}")
        if self.epochs < 0:
            raise ConfigurationError(f"stage2.epochs must be >= 0, got {self.epochs}")
        if self.bank_policy not in ("resample_per_forward", "fixed_per_image"):
            raise ConfigurationError(f"Unknown bank policy {self.bank_policy}")

    @classmethod
    def from_dict(cls, d: dict, **overrides) -> 'Stage2Config':
        return cls(**dict(d, **overrides))


def expert_prompt(features: torch.Tensor, head: torch.nn.Module) -> LatentCode:
    """Global average pooling of head(features): [B, C, H, W] -> [B, D]."""
    return head(features).mean(dim=(-2, -1))


def cross_attention(z: LatentCode, bank: Union[PriorBank, torch.Tensor], scale: bool = False,
                    return_weights: bool = False):
    """
    z [..., D] attends over bank [..., D, M]: w = softmax(z . bank) over M, output = bank w.
    With scale=True the logits are divided by sqrt(D).
    """
    columns = bank.columns if isinstance(bank, PriorBank) else bank
    if z.shape[-1] != columns.shape[-2]:
        raise ContractViolation(f"prompt dimension {z.shape[-1]} does not match bank dimension {columns.shape[-2]}")
    logits = einsum(z, columns, '... d, ... d m -> ... m')
    if scale:
        logits = logits / math.sqrt(z.shape[-1])
    if not torch.isfinite(logits).all():
        raise ContractViolation("Non-finite attention logits")
    weights = torch.softmax(logits, dim=-1)
    out = einsum(columns, weights, '... d m, ... m -> ... d')
    if return_weights:
        return out, weights
    return out


def image_digest(image: torch.Tensor) -> str:
    return hashlib.sha256(image.detach().cpu().contiguous().numpy().tobytes()).hexdigest()[:16]


def prior_banks(prior: DiagonalGaussian, images: torch.Tensor, M: int, fixed_seed: Optional[int] = None,
                generator: Optional[torch.Generator] = None) -> PriorBank:
    """
    One bank per image, [B, D, M]. With fixed_seed, each image's bank depends only on (fixed_seed, image bytes);
    otherwise all banks are drawn from `generator`.
    """
    if fixed_seed is None:
        return sample_prior_bank(prior, M, generator)
    columns = []
    for b in range(images.shape[0]):
        gen = common.make_generator(common.derive_seed(fixed_seed, image_digest(images[b])))
        columns.append(sample_prior_bank(prior[b], M, gen).columns)
    return PriorBank(torch.stack(columns), fixed_seed)


def _require_heads(bundle: ModelBundle):
    if len(bundle.projection_heads) != bundle.num_raters:
        raise ArtifactError("Model has no projection heads; run train-stage2 on a stage-one checkpoint first")


def personalize_all(bundle: ModelBundle, images: torch.Tensor, M: int = 100, fixed_seed: Optional[int] = None,
                    generator: Optional[torch.Generator] = None, scale: bool = False) -> torch.Tensor:
    """
    Personalized probability maps for every rater: [B, 1, H, W] -> [B, R, H, W].
    """
    _require_heads(bundle)
    feats = bundle.features(images)
    bank = prior_banks(bundle.encode_prior(images), images, M, fixed_seed, generator)
    prompts = torch.stack([expert_prompt(feats, head) for head in bundle.projection_heads], dim=1)  # [B, R, D]
    columns = bank.columns.unsqueeze(1).expand(-1, prompts.shape[1], -1, -1)
    z_hat = cross_attention(prompts, columns, scale=scale)
    return torch.sigmoid(bundle.decode(feats, z_hat))


def personalize_forward(bundle: ModelBundle, image: torch.Tensor, rater_index: int, M: int = 100,
                        fixed_seed: Optional[int] = None, generator: Optional[torch.Generator] = None,
                        scale: bool = False) -> torch.Tensor:
    """
    Personalized prediction for one rater (1-based rater_index): [B, 1, H, W] -> [B, H, W].
    """
    _require_heads(bundle)
    if not 1 <= rater_index <= bundle.num_raters:
        raise ContractViolation(f"rater_index must be in [1, {bundle.num_raters}], got {rater_index}")
    feats = bundle.features(image)
    bank = prior_banks(bundle.encode_prior(image), image, M, fixed_seed, generator)
    z_hat = cross_attention(expert_prompt(feats, bundle.projection_heads[rater_index - 1]), bank, scale=scale)
    return torch.sigmoid(bundle.decode(feats, z_hat))


@torch.no_grad()
def validation_dice_mean(bundle: ModelBundle, dataset: MultiRaterDataset, config: Stage2Config) -> float:
    scores = []
    for images, annotations, _ in iterate_batches(dataset, config.batch_size, shuffle=False):
        preds = personalize_all(bundle, images, config.M, fixed_seed=config.eval_bank_seed,
                                scale=config.attention_scale)
        for p, a in zip(preds, annotations):
            scores.append(per_rater_dice(p, a > 0.5)[1])
    return float(np.mean(scores))


@dataclass
class Stage2Result:
    bundle: ModelBundle
    history: List[dict]
    best_epoch: int
    stage1_checksums: dict
    checkpoint_path: Optional[str] = None


def load_stage1(stage1_checkpoint: Union[str, ModelBundle], dataset: MultiRaterDataset,
                expected_shape_hash: Optional[str] = None) -> Tuple[ModelBundle, dict]:
    """
    Loads a stage-one bundle and checks that it agrees with the dataset on R, H and W. With expected_shape_hash
    (the shape hash of the current config) the checkpoint must also agree on D.
    """
    if isinstance(stage1_checkpoint, str):
        if not os.path.exists(stage1_checkpoint):
            raise ArtifactError(f"Missing stage-one checkpoint {stage1_checkpoint}; run train-stage1 first")
        bundle, meta = load_checkpoint(stage1_checkpoint)
    else:
        bundle, meta = copy.deepcopy(stage1_checkpoint), {'shape_hash': ''}
    if bundle.mode != "diverse":
        raise ArtifactError("Personalization needs a diversified stage-one model, got a single-label one")
    if bundle.num_raters != dataset.num_raters:
        raise ArtifactError(f"Stage-one model was trained with R={bundle.num_raters}, dataset has "
                            f"R={dataset.num_raters}")
    expected = compute_shape_hash(bundle.latent_dim, dataset.num_raters, *dataset.image_size)
    actual = meta.get('shape_hash') or expected
    if actual != expected:
        raise ArtifactError(f"Stage-one checkpoint shape hash {actual} does not match the dataset "
                            f"({expected}); D, R, H or W differ")
    if expected_shape_hash is not None and actual != expected_shape_hash:
        raise ArtifactError(f"Stage-one checkpoint shape hash {actual} does not match the current config "
                            f"({expected_shape_hash}); the checkpoint has D={bundle.latent_dim}")
    return bundle, meta


def train_stage2(dataset: MultiRaterDataset, stage1_checkpoint: Union[str, ModelBundle], config: Stage2Config,
                 out_dir: Optional[str] = None, logger: common.Logger = common.EmptyLogger(),
                 val_dataset: Optional[MultiRaterDataset] = None, config_hash: Optional[str] = None,
                 proj_hidden: Optional[int] = None, expected_shape_hash: Optional[str] = None) -> Stage2Result:
    """
    Trains the R projection heads with every stage-one component frozen. Frozen checksums are compared with their
    stage-one values after every epoch; a mismatch raises FrozenParameterDrift.
    Keeps the epoch with the best validation Dice_mean. Per-epoch records: {epoch, l_corr, val_dice_mean}.
    """
    bundle, _ = load_stage1(stage1_checkpoint, dataset, expected_shape_hash)
    stage1_checksums = {name: value for name, value in bundle.checksums().items() if name in FROZEN}

    common.set_seed(config.seed)
    bundle.add_projection_heads(proj_hidden)
    bundle.freeze(FROZEN)
    bundle.eval()
    optimizer = torch.optim.Adam(bundle.projection_heads.parameters(), lr=config.learning_rate,
                                 weight_decay=config.l2)
    gen = common.make_generator(common.derive_seed(config.seed, "stage2", "banks"))
    rng = np.random.default_rng(common.derive_seed(config.seed, "stage2", "batches"))
    train_fixed_seed = config.eval_bank_seed if config.bank_policy == "fixed_per_image" else None

    params = bundle.projection_heads[0].num_parameters()
    logger.log(f"Stage II on {dataset}: M={config.M}, bank={config.bank_policy}, {params} parameters per head")
    history, best_state, best_epoch, best_score = [], None, -1, -float('inf')

    for epoch in tqdm(range(config.epochs), desc="stage2", leave=False):
        total, num_batches = 0.0, 0
        for b, (images, annotations, _) in enumerate(iterate_batches(dataset, config.batch_size, rng)):
            preds = personalize_all(bundle, images, config.M, train_fixed_seed, gen, config.attention_scale)
            loss = loss_stage2(preds, annotations).mean()
            if not torch.isfinite(loss):
                raise NonFiniteLoss(epoch, b, {'l_corr': float(loss)})
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss.detach())
            num_batches += 1
        bundle.assert_frozen(stage1_checksums)

        record = {'epoch': epoch, 'l_corr': total / num_batches, 'val_dice_mean': None}
        if val_dataset is not None:
            record['val_dice_mean'] = validation_dice_mean(bundle, val_dataset, config)
            if record['val_dice_mean'] > best_score:
                best_score, best_epoch = record['val_dice_mean'], epoch
                best_state = copy.deepcopy(bundle.projection_heads.state_dict())
        history.append(record)
        logger.log_metrics(record)
        logger.log(f"epoch {epoch}: l_corr={record['l_corr']}, val_dice_mean={record['val_dice_mean']}")

    if best_state is not None:
        bundle.projection_heads.load_state_dict(best_state)
    else:
        best_epoch = config.epochs - 1
    bundle.assert_frozen(stage1_checksums)
    logger.log(f"Selected epoch {best_epoch}; frozen components unchanged")

    path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, STAGE2_CHECKPOINT)
        shape = compute_shape_hash(bundle.latent_dim, bundle.num_raters, *dataset.image_size)
        save_checkpoint(bundle, path, stage="stage2", config_hash=config_hash, shape_hash=shape,
                        extra={'best_epoch': best_epoch, 'M': config.M, 'stage1_checksums': stage1_checksums})
        logger.log(f"Saved checkpoint to {path}")
    return Stage2Result(bundle, history, best_epoch, stage1_checksums, path)
