import os
from typing import Optional, Sequence

import numpy as np
import torch
from tqdm import tqdm

from dpersona import common
from dpersona.dataset import MultiRaterDataset
from dpersona.evaluation.metrics import DEFAULT_THRESHOLDS, EvalReport, sample_metrics
from dpersona.evaluation.report import save_per_sample, save_report
from dpersona.model import ModelBundle
from dpersona.stage1 import infer_single
from dpersona.stage2 import personalize_all


class PersonalEval:
    """
    Personalized evaluation: per-rater Dice plus the set metrics of the predictions.

    Stage II predicts one map per rater, which also forms its prediction set. Single-label baselines
    predict one map that is scored against every rater; Dice_max / Dice_match are N/A for them.
    """
    @staticmethod
    @torch.no_grad()
    def predict(bundle: ModelBundle, dataset: MultiRaterDataset, M: int = 100, bank_seed: int = 1234,
                scale: bool = False) -> np.ndarray:
        """[N, R, H, W] for a personalized model, [N, 1, H, W] for a single-label one."""
        bundle.eval()
        out = []
        for i in tqdm(range(len(dataset)), desc="predict", leave=False):
            image = dataset.images[i:i + 1]
            if len(bundle.projection_heads):
                out.append(personalize_all(bundle, image, M, fixed_seed=bank_seed, scale=scale)[0].numpy())
            else:
                out.append(infer_single(bundle, image).numpy())
        return np.stack(out)

    @staticmethod
    def run_personal_eval(
        bundle: ModelBundle,
        dataset: MultiRaterDataset,
        method: str,
        M: int = 100,
        bank_seed: int = 1234,
        scale: bool = False,
        thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
        threshold: float = 0.5,
        out_dir: Optional[str] = None,
        config_hash: Optional[str] = None,
        logger=common.EmptyLogger()
        ) -> EvalReport:
        preds = PersonalEval.predict(bundle, dataset, M, bank_seed, scale)
        anns = dataset.annotations.numpy()
        R = anns.shape[1]
        per_sample = []
        for p, a in zip(preds, anns):
            rater_preds = p if p.shape[0] == R else np.repeat(p, R, axis=0)
            per_sample.append(sample_metrics(p, a, thresholds, threshold, rater_preds=rater_preds))
        report = EvalReport.aggregate(method, None, per_sample, seeds={'bank': bank_seed}, config_hash=config_hash,
                                      code_version=common.code_version())
        logger.log(f"{method}: Dice_mean={report.dice_mean}, per rater {report.dice_per_rater}, GED={report.ged}")
        if out_dir is not None:
            save_report(report, out_dir)
            rows = [dict(r, sample_id=sid, method=method, sampling_number=None)
                    for sid, r in zip(dataset.sample_ids, per_sample)]
            save_per_sample(rows, os.path.join(out_dir, f"per_sample_{method.replace(':', '-')}.csv"), R)
        return report
