"""
Overlap kernels and set-to-set scores for multi-rater segmentation.

Masks are numpy arrays (torch tensors are converted). Sets are stacked along the first axis:
preds [m, H, W], anns [n, H, W]. Empty-vs-empty IoU and Dice are defined as 1.
"""
import math
from dataclasses import dataclass, asdict, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from jsonschema import validate, ValidationError
from scipy.optimize import linear_sum_assignment

from dpersona.common import ContractViolation

DEFAULT_THRESHOLDS = (0.1, 0.3, 0.5, 0.7, 0.9)


def _as_array(x) -> np.ndarray:
    if hasattr(x, 'detach'):
        x = x.detach().cpu().numpy()
    return np.asarray(x)


def binarize(x, threshold: float = 0.5) -> np.ndarray:
    return _as_array(x) > threshold


def _check_same_shape(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ContractViolation(f"Shape mismatch {a.shape} vs {b.shape}")


def iou(a, b) -> float:
    a, b = _as_array(a).astype(bool), _as_array(b).astype(bool)
    _check_same_shape(a, b)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def dice(a, b) -> float:
    a, b = _as_array(a).astype(bool), _as_array(b).astype(bool)
    _check_same_shape(a, b)
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return float(2 * np.logical_and(a, b).sum() / total)


def _flatten_set(masks, name: str) -> np.ndarray:
    masks = _as_array(masks).astype(bool)
    if masks.ndim < 2 or masks.shape[0] < 1:
        raise ContractViolation(f"{name} must be a non-empty stack of masks, got shape {masks.shape}")
    return masks.reshape(masks.shape[0], -1)


def pairwise_iou(x, y) -> np.ndarray:
    """[m, ...] x [n, ...] -> [m, n] IoU matrix."""
    x, y = _flatten_set(x, "x"), _flatten_set(y, "y")
    if x.shape[1] != y.shape[1]:
        raise ContractViolation(f"Mask sizes differ: {x.shape[1]} vs {y.shape[1]}")
    xi, yi = x.astype(np.int64), y.astype(np.int64)
    inter = xi @ yi.T
    union = xi.sum(1)[:, None] + yi.sum(1)[None, :] - inter
    with np.errstate(invalid='ignore', divide='ignore'):
        out = inter / union
    out[union == 0] = 1.0
    return out


def pairwise_dice(x, y) -> np.ndarray:
    """[m, ...] x [n, ...] -> [m, n] Dice matrix."""
    x, y = _flatten_set(x, "x"), _flatten_set(y, "y")
    if x.shape[1] != y.shape[1]:
        raise ContractViolation(f"Mask sizes differ: {x.shape[1]} vs {y.shape[1]}")
    xi, yi = x.astype(np.int64), y.astype(np.int64)
    inter = xi @ yi.T
    total = xi.sum(1)[:, None] + yi.sum(1)[None, :]
    with np.errstate(invalid='ignore', divide='ignore'):
        out = 2 * inter / total
    out[total == 0] = 1.0
    return out


def ged_components(preds, anns) -> Tuple[float, float, float]:
    """
    Returns (E d(p, a), E d(p, p'), E d(a, a')) with d = 1 - IoU. Self-pairs are included.
    """
    cross = float(np.mean(1.0 - pairwise_iou(preds, anns)))
    d_preds = float(np.mean(1.0 - pairwise_iou(preds, preds)))
    d_anns = float(np.mean(1.0 - pairwise_iou(anns, anns)))
    return cross, d_preds, d_anns


def ged(preds, anns) -> float:
    """Squared generalized energy distance between two sets of binary masks."""
    cross, d_preds, d_anns = ged_components(preds, anns)
    return 2 * cross - d_preds - d_anns


def dice_soft(preds, anns, thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> float:
    """
    Thresholded Dice between the mean prediction and the mean annotation, averaged over thresholds.
    """
    preds, anns = _as_array(preds).astype(np.float64), _as_array(anns).astype(np.float64)
    if preds.shape[0] < 1 or anns.shape[0] < 1:
        raise ContractViolation("dice_soft needs non-empty prediction and annotation sets")
    p_soft, a_soft = preds.mean(0), anns.mean(0)
    return float(np.mean([dice(p_soft > t, a_soft > t) for t in thresholds]))


@dataclass
class DiceMatrix:
    values: np.ndarray  # [m predictions, n annotations]

    @property
    def num_preds(self) -> int:
        return self.values.shape[0]

    @property
    def num_anns(self) -> int:
        return self.values.shape[1]


def dice_matrix(preds, anns, threshold: float = 0.5) -> DiceMatrix:
    return DiceMatrix(pairwise_dice(binarize(preds, threshold), _as_array(anns).astype(bool)))


def dice_max(m: DiceMatrix) -> float:
    return float(np.mean(m.values.max(axis=0)))


def dice_match(m: DiceMatrix) -> float:
    """
    Mean Dice of the best one-to-one assignment of annotations to distinct predictions.
    """
    if m.num_preds < m.num_anns:
        raise ContractViolation(f"dice_match needs at least as many predictions ({m.num_preds}) "
                                f"as annotations ({m.num_anns})")
    rows, cols = linear_sum_assignment(m.values, maximize=True)
    return float(m.values[rows, cols].sum() / m.num_anns)


def per_rater_dice(preds, anns, threshold: float = 0.5) -> Tuple[List[float], float]:
    preds, anns = _as_array(preds), _as_array(anns)
    if preds.shape[0] != anns.shape[0]:
        raise ContractViolation(f"{preds.shape[0]} personalized predictions for {anns.shape[0]} raters")
    scores = [dice(p > threshold, a.astype(bool)) for p, a in zip(preds, anns)]
    return scores, float(np.mean(scores))


def sample_metrics(preds, anns, thresholds: Sequence[float] = DEFAULT_THRESHOLDS, threshold: float = 0.5,
                   rater_preds=None) -> Dict[str, Optional[float]]:
    """
    All metrics for one image.
    preds: [m, H, W] probability maps; anns: [n, H, W] binary.
    rater_preds: optional [n, H, W] maps, rater_preds[i] being the prediction for rater i; enables per-rater Dice.
    Dice_max / Dice_match are None when m < n.
    """
    preds, anns = _as_array(preds), _as_array(anns)
    hard = binarize(preds, threshold)
    out = {
        'ged': ged(hard, anns),
        'dice_soft': dice_soft(hard, anns, thresholds),
        'dice_max': None,
        'dice_match': None,
        'dice_per_rater': None,
        'dice_mean': None,
    }
    if preds.shape[0] >= anns.shape[0]:
        m = dice_matrix(preds, anns, threshold)
        out['dice_max'], out['dice_match'] = dice_max(m), dice_match(m)
        assert out['dice_match'] <= out['dice_max'] + 1e-12, \
            f"Dice_match {out['dice_match']} exceeds Dice_max {out['dice_max']}"
    if rater_preds is not None:
        out['dice_per_rater'], out['dice_mean'] = per_rater_dice(rater_preds, anns, threshold)
    return out


_nullable_number = {"anyOf": [{"type": "number"}, {"type": "null"}]}

EVAL_REPORT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["method", "sampling_number", "num_images", "seeds", "ged", "dice_soft", "dice_max",
                 "dice_match", "dice_per_rater", "dice_mean", "config_hash", "code_version", "format_version"],
    "properties": {
        "method": {"type": "string"},
        "sampling_number": {"anyOf": [{"type": "integer", "minimum": 1}, {"type": "null"}]},
        "num_images": {"type": "integer", "minimum": 1},
        "seeds": {"type": "object", "additionalProperties": {"type": "integer"}},
        "ged": {"type": "number"},
        "dice_soft": {"type": "number", "minimum": 0, "maximum": 1},
        "dice_max": _nullable_number,
        "dice_match": _nullable_number,
        "dice_per_rater": {"anyOf": [{"type": "array", "items": {"type": "number"}}, {"type": "null"}]},
        "dice_mean": _nullable_number,
        "config_hash": {"anyOf": [{"type": "string"}, {"type": "null"}]},
        "code_version": {"anyOf": [{"type": "string"}, {"type": "null"}]},
        "format_version": {"type": "string"},
    },
}


def _round(x: Optional[float]) -> Optional[float]:
    return None if x is None else round(float(x), 8)


@dataclass
class EvalReport:
    """
    Aggregate metrics of one method over a test split, averaged over images.

    JSON schema: EVAL_REPORT_SCHEMA. Values are rounded to 8 decimals so that the serialized report
    does not depend on floating-point summation noise below that precision.
    """
    method: str
    sampling_number: Optional[int]
    num_images: int
    ged: float
    dice_soft: float
    dice_max: Optional[float] = None
    dice_match: Optional[float] = None
    dice_per_rater: Optional[List[float]] = None
    dice_mean: Optional[float] = None
    seeds: Dict[str, int] = field(default_factory=dict)
    config_hash: Optional[str] = None
    code_version: Optional[str] = None
    format_version: str = "1"

    @classmethod
    def aggregate(cls, method: str, sampling_number: Optional[int], per_sample: List[dict],
                  **kwargs) -> 'EvalReport':
        if not per_sample:
            raise ContractViolation("Cannot aggregate an empty evaluation")

        def mean_of(key):
            values = [r[key] for r in per_sample]
            if any(v is None for v in values):
                return None
            return float(np.mean(values))

        per_rater = None
        if all(r['dice_per_rater'] is not None for r in per_sample):
            per_rater = np.mean(np.array([r['dice_per_rater'] for r in per_sample]), axis=0).tolist()
        report = cls(
            method=method,
            sampling_number=sampling_number,
            num_images=len(per_sample),
            ged=_round(mean_of('ged')),
            dice_soft=_round(mean_of('dice_soft')),
            dice_max=_round(mean_of('dice_max')),
            dice_match=_round(mean_of('dice_match')),
            dice_per_rater=None if per_rater is None else [_round(v) for v in per_rater],
            dice_mean=None if per_rater is None else _round(float(np.mean(per_rater))),
            **kwargs,
        )
        report.check()
        return report

    def check(self):
        if self.dice_max is not None and self.dice_match is not None:
            assert self.dice_match <= self.dice_max + 1e-8, f"{self.method}: Dice_match > Dice_max"
        if self.dice_per_rater is not None:
            assert math.isclose(self.dice_mean, round(float(np.mean(self.dice_per_rater)), 8), abs_tol=1e-7)

    def to_dict(self) -> dict:
        d = asdict(self)
        try:
            validate(d, EVAL_REPORT_SCHEMA)
        except ValidationError as e:
            raise ContractViolation(f"EvalReport does not match its schema: {e.message}") from e
        return d

    @classmethod
    def from_dict(cls, d: dict) -> 'EvalReport':
        validate(d, EVAL_REPORT_SCHEMA)
        return cls(**d)
