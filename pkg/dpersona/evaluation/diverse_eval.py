import os
from functools import partial
from typing import List, Optional, Sequence

import numpy as np
import torch
from tqdm import tqdm
from tqdm.contrib.concurrent import process_map

from dpersona import common
from dpersona.dataset import MultiRaterDataset
from dpersona.evaluation.metrics import DEFAULT_THRESHOLDS, EvalReport, sample_metrics
from dpersona.evaluation.report import save_per_sample, save_report
from dpersona.model import ModelBundle
from dpersona.stage1 import infer_diverse


def _metrics_for_sets(job, thresholds, threshold):
    preds, anns = job
    return sample_metrics(preds, anns, thresholds, threshold)


class DiverseEval:
    """
    Set-to-set evaluation of sampled predictions (stage1 and the prob-unet baseline).
    """
    @staticmethod
    @torch.no_grad()
    def sample_predictions(bundle: ModelBundle, dataset: MultiRaterDataset, n_samples: int, seed: int) -> np.ndarray:
        """
        [N, n_samples, H, W] probability maps. Image i uses its own generator seeded from (seed, sample id),
        so the first n draws of a larger run equal a run with n samples.
        """
        bundle.eval()
        out = []
        for i in tqdm(range(len(dataset)), desc="sampling", leave=False):
            gen = common.make_generator(common.derive_seed(seed, "eval", dataset.sample_ids[i]))
            out.append(infer_diverse(bundle, dataset.images[i:i + 1], n_samples, gen)[0].numpy())
        return np.stack(out)

    @staticmethod
    def run_diverse_eval(
        bundle: ModelBundle,
        dataset: MultiRaterDataset,
        method: str,
        sampling_numbers: Sequence[int] = (10, 30, 50),
        seed: int = 0,
        thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
        threshold: float = 0.5,
        workers: int = 1,
        out_dir: Optional[str] = None,
        config_hash: Optional[str] = None,
        logger=common.EmptyLogger()
        ) -> List[EvalReport]:
        """
        One EvalReport per sampling number. Prediction sets are nested: the #10 set is a prefix of the #50 set.
        """
        sampling_numbers = sorted(set(int(n) for n in sampling_numbers))
        preds = DiverseEval.sample_predictions(bundle, dataset, max(sampling_numbers), seed)
        anns = dataset.annotations.numpy()
        reports, rows = [], []
        for n in sampling_numbers:
            jobs = [(preds[i, :n], anns[i]) for i in range(len(dataset))]
            fn = partial(_metrics_for_sets, thresholds=thresholds, threshold=threshold)
            if workers > 1:
                per_sample = process_map(fn, jobs, max_workers=workers, chunksize=4, desc=f"{method} #{n}")
            else:
                per_sample = [fn(job) for job in tqdm(jobs, desc=f"{method} #{n}", leave=False)]
            report = EvalReport.aggregate(method, n, per_sample, seeds={'eval': seed}, config_hash=config_hash,
                                          code_version=common.code_version())
            logger.log(f"{method} #{n}: GED={report.ged}, Dice_soft={report.dice_soft}, "
                       f"Dice_max={report.dice_max}, Dice_match={report.dice_match}")
            reports.append(report)
            rows += [dict(r, sample_id=sid, method=method, sampling_number=n)
                     for sid, r in zip(dataset.sample_ids, per_sample)]
            if out_dir is not None:
                save_report(report, out_dir)
        if out_dir is not None:
            save_per_sample(rows, os.path.join(out_dir, f"per_sample_{method}.csv"), dataset.num_raters)
        return reports
