"""
Label fusion for the crowdsourcing baselines: majority voting, random selection and binary STAPLE.
Fused labels are stored as single-rater datasets and trained with the single-label stage-one path.
"""
from dataclasses import dataclass, field
from functools import partial
from typing import List, Optional

import numpy as np
from scipy.special import logsumexp
from tqdm import tqdm
from tqdm.contrib.concurrent import process_map

from dpersona import common
from dpersona.common import ConfigurationError, ContractViolation

PROB_CLAMP = 1e-6
STAPLE_INIT = 0.99999


def _check_annotations(annotations) -> np.ndarray:
    a = np.asarray(annotations)
    if a.ndim != 3 or a.shape[0] < 1:
        raise ContractViolation(f"annotations must be [R, H, W] with R >= 1, got {a.shape}")
    return a > 0.5


def majority_vote(annotations) -> np.ndarray:
    """Foreground iff at least half of the raters vote foreground (ties go to foreground)."""
    a = _check_annotations(annotations)
    return (2 * a.sum(0) >= a.shape[0]).astype(np.uint8)


def random_select(annotations, rng: np.random.Generator) -> np.ndarray:
    a = _check_annotations(annotations)
    return a[int(rng.integers(a.shape[0]))].astype(np.uint8)


@dataclass
class StapleEstimate:
    consensus: np.ndarray          # [H, W] foreground weights in [0, 1]
    sensitivity: np.ndarray        # p_j, [R]
    specificity: np.ndarray        # q_j, [R]
    iterations: int
    converged: bool
    prior: float = 0.0
    log_likelihood: List[float] = field(default_factory=list)

    def binary(self, threshold: float = 0.5) -> np.ndarray:
        return (self.consensus > threshold).astype(np.uint8)


def staple(annotations, max_iters: int = 50, tol: float = 1e-6, init: float = STAPLE_INIT,
           prior: Optional[float] = None) -> StapleEstimate:
    """
    Binary STAPLE with a spatially uniform foreground prior (default: global mean vote rate).

    E-step: posterior foreground weight per pixel from the current sensitivities p_j and specificities q_j.
    M-step: p_j, q_j re-estimated from the weights and clamped to [1e-6, 1 - 1e-6].
    Stops when the weights move by less than tol or after max_iters iterations. The observed-data
    log-likelihood is recorded every iteration and must not decrease.
    """
    a = _check_annotations(annotations)
    R = a.shape[0]
    if R < 2:
        raise ContractViolation(f"STAPLE needs at least two raters, got R={R}")
    if max_iters < 1:
        raise ConfigurationError(f"max_iters must be >= 1, got {max_iters}")
    if not a.any() or a.all():
        mv = majority_vote(a).astype(np.float64)
        return StapleEstimate(mv, np.ones(R), np.ones(R), 0, False, float(a.mean()))

    D = a.reshape(R, -1).astype(np.float64)
    f = float(D.mean()) if prior is None else float(prior)
    f = min(max(f, PROB_CLAMP), 1 - PROB_CLAMP)
    p = np.full(R, init)
    q = np.full(R, init)
    weights = np.zeros(D.shape[1])
    history: List[float] = []
    converged = False

    it = 0
    for it in range(1, max_iters + 1):
        # E-step in the log domain
        log_a = np.log(f) + D.T @ np.log(p) + (1 - D).T @ np.log1p(-p)
        log_b = np.log1p(-f) + (1 - D).T @ np.log(q) + D.T @ np.log1p(-q)
        log_norm = logsumexp(np.stack([log_a, log_b]), axis=0)
        new_weights = np.exp(log_a - log_norm)

        ll = float(log_norm.sum())
        if history and ll < history[-1] - 1e-9 * max(1.0, abs(history[-1])):
            raise RuntimeError(f"STAPLE log-likelihood decreased at iteration {it}: {history[-1]} -> {ll}")
        history.append(ll)

        delta = np.abs(new_weights - weights).max()
        weights = new_weights

        # M-step
        fg, bg = weights.sum(), (1 - weights).sum()
        p = np.clip((D @ weights) / max(fg, PROB_CLAMP), PROB_CLAMP, 1 - PROB_CLAMP)
        q = np.clip(((1 - D) @ (1 - weights)) / max(bg, PROB_CLAMP), PROB_CLAMP, 1 - PROB_CLAMP)

        if it > 1 and delta < tol:
            converged = True
            break

    return StapleEstimate(weights.reshape(a.shape[1:]), p, q, it, converged, f, history)


def _fuse_one(annotations: np.ndarray, method: str, seed: int, max_iters: int, tol: float) -> np.ndarray:
    if method == "mv":
        return majority_vote(annotations)
    if method == "staple":
        return staple(annotations, max_iters, tol).binary()
    if method == "rs":
        return random_select(annotations, np.random.default_rng(seed))
    if method.startswith("rater:"):
        i = int(method.split(":", 1)[1])
        if not 1 <= i <= annotations.shape[0]:
            raise ContractViolation(f"rater index must be in [1, {annotations.shape[0]}], got {i}")
        return (np.asarray(annotations[i - 1]) > 0.5).astype(np.uint8)
    raise ConfigurationError(f"Unknown fusion method {method}")


def fuse_labels(dataset, method: str, seed: int = 0, max_iters: int = 50, tol: float = 1e-6,
                workers: int = 1, logger: common.Logger = common.EmptyLogger()):
    """
    Fuses the annotations of every sample into one label and returns a single-rater dataset (R = 1).

    method: "mv", "staple", "rs" (one seeded draw per sample) or "rater:<i>" (1-based).
    """
    annotations = dataset.annotations.numpy()
    seeds = [common.derive_seed(seed, "fuse", sid) for sid in dataset.sample_ids]
    fn = partial(_fuse_one, method=method, max_iters=max_iters, tol=tol)
    jobs = list(zip(annotations, seeds))
    if workers > 1:
        fused = process_map(_FuseJob(fn), jobs, max_workers=workers, chunksize=8, desc=f"fuse {method}")
    else:
        fused = [fn(a, seed=s) for a, s in tqdm(jobs, desc=f"fuse {method}", leave=False)]
    fused = np.stack(fused)[:, None]
    logger.log(f"Fused {len(fused)} samples with {method}: mean foreground {float(fused.mean()):.4f}")
    return dataset.with_annotations(fused, name=f"{dataset.name}-{method.replace(':', '')}")


class _FuseJob:
    def __init__(self, fn):
        self.fn = fn

    def __call__(self, job):
        annotations, seed = job
        return self.fn(annotations, seed=seed)
