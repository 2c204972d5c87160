"""
Command-line surface.

    d-persona gen-data      --config C --out DIR [--seed N] [--force]
    d-persona train-stage1  --config C --out DIR [--seed N] [--force]
    d-persona train-stage2  --config C --out DIR [--seed N] [--force]
    d-persona baseline      --config C --out DIR --method {prob-unet|mv|rs|staple|single-rater:<i>} [--seed N] [--force]
    d-persona eval          --config C --out DIR --method {stage1|stage2|prob-unet|mv|rs|staple|single-rater:<i>}
                            [--samples {10|30|50}] [--seed N] [--force]
    d-persona report        --config C --out DIR [--force]
    d-persona ablate        --config C --out DIR [--seed N] [--force]
    d-persona pipeline      --config C --out DIR [--force]

All commands share one run directory (--out, default $RESULTS_DIR):

    DIR/data/                      split archives + manifest.json
    DIR/stage1/stage1.safetensors
    DIR/stage2/stage2.safetensors
    DIR/baselines/<method>/<method>.safetensors
    DIR/eval/<method>/eval_*.json, per_sample_*.csv
    DIR/report/table.txt, table.csv, overlays/*.png
    DIR/ablation/table.txt, table.csv
    DIR/ledger.jsonl               one RunRecord per command
"""
import os
import time
from dataclasses import dataclass, asdict, field
from typing import Dict, List, Optional, Union

import fire
import torch

from dpersona import common
from dpersona.common import ArtifactError, ConfigurationError
from dpersona.config import ExperimentConfig, shape_hash
from dpersona.dataset import MultiRaterDataset
from dpersona.evaluation.diverse_eval import DiverseEval
from dpersona.evaluation.personal_eval import PersonalEval
from dpersona.evaluation.report import (build_table, format_table, load_reports, plot_diverse_overlay,
                                        plot_personal_overlay, write_table_csv)
from dpersona.fusion import fuse_labels
from dpersona.model import load_checkpoint
from dpersona.stage1 import Stage1Config, infer_diverse, train_stage1 as _train_stage1
from dpersona.stage2 import Stage2Config, STAGE2_CHECKPOINT, personalize_all, train_stage2 as _train_stage2
from dpersona.synthgen import build_dataset

DIVERSE_METHODS = ("stage1", "prob-unet")
SINGLE_METHODS = ("mv", "rs", "staple")


@dataclass
class RunRecord:
    run_id: str
    command: str
    config_hash: str
    seeds: Dict[str, int]
    code_version: str
    artifacts: List[str] = field(default_factory=list)
    wall_clock_s: float = 0.0


def _safe(method: str) -> str:
    return method.replace(':', '-')


def _check_method(method: str, allowed) -> str:
    if method in allowed:
        return method
    if method.startswith("single-rater:"):
        try:
            int(method.split(":", 1)[1])
        except ValueError:
            raise ConfigurationError(f"Bad rater index in {method}")
        return method
    raise ConfigurationError(f"Unknown method {method}; expected one of {list(allowed)} or single-rater:<i>")


class Experiment:
    """
    Shared state of one command: resolved config, run directory, logger and ledger entry.
    """
    def __init__(self, command: str, config: Optional[str], out: Optional[str], seed: Optional[int],
                 seed_section: Optional[str], log_level: int = 1, overrides: Optional[dict] = None):
        overrides = dict(overrides or {})
        if seed is not None and seed_section is not None:
            overrides.setdefault(seed_section, {})['seed'] = int(seed)
        self.config = ExperimentConfig.load(config, overrides)
        self.command = command
        self.root = out if out is not None else common.RESULTS_DIR
        self.log_level = log_level
        self.started = time.time()
        self.record = RunRecord(
            run_id=f"{command}-{time.strftime('%Y%m%d-%H%M%S')}",
            command=command,
            config_hash=self.config.hash(),
            seeds={s: self.config[s]['seed'] for s in ('synthgen', 'stage1', 'stage2', 'metrics', 'baselines')},
            code_version=common.code_version(),
        )

    def path(self, *parts) -> str:
        return os.path.join(self.root, *parts)

    def fresh(self, *parts, force: bool = False) -> str:
        d = self.path(*parts)
        common.ensure_fresh_dir(d, force=force)
        return d

    def logger(self, out_dir: str, run_name: Optional[str] = None) -> common.Logger:
        self.log = common.Logger(out_dir, run_name or self.command.replace('-', '_'), log_level=self.log_level)
        self.log.log(f"config hash {self.record.config_hash}, code {self.record.code_version}")
        self.log.log(self.config.to_json())
        return self.log

    def load_split(self, split: str) -> MultiRaterDataset:
        if not os.path.exists(self.path("data", "manifest.json")):
            raise ArtifactError(f"No dataset in {self.path('data')}; run gen-data first")
        return MultiRaterDataset.load(self.path("data"), split)

    def finish(self, *artifacts: str):
        self.record.artifacts = [os.path.relpath(a, self.root) for a in artifacts]
        self.record.wall_clock_s = round(time.time() - self.started, 3)
        os.makedirs(self.root, exist_ok=True)
        common.write_jsonl(self.path("ledger.jsonl"), [asdict(self.record)], append=True)
        if getattr(self, 'log', None) is not None:
            self.log.close()


def gen_data(config: Optional[str] = None, out: Optional[str] = None, seed: Optional[int] = None,
             force: bool = False, log_level: int = 1):
    """Generates the synthetic multi-rater benchmark into DIR/data."""
    exp = Experiment("gen-data", config, out, seed, "synthgen", log_level)
    data_dir = exp.fresh("data", force=force)
    logger = exp.logger(data_dir)
    manifest = build_dataset(exp.config['synthgen'], data_dir, force=True, logger=logger,
                             config_hash=exp.record.config_hash)
    logger.log(f"Test split rater statistics: {manifest.stats['test']}")
    exp.finish(data_dir)
    return data_dir


def _stage1_config(exp: Experiment, **overrides) -> Stage1Config:
    return Stage1Config.from_dict(exp.config['stage1'], **overrides)


def _shape_hash(exp: Experiment, dataset: MultiRaterDataset) -> str:
    return shape_hash(exp.config['model']['latent_dim'], dataset.num_raters, *dataset.image_size)


def train_stage1(config: Optional[str] = None, out: Optional[str] = None, seed: Optional[int] = None,
                 force: bool = False, log_level: int = 1):
    """Trains the diversified stage-one model into DIR/stage1."""
    exp = Experiment("train-stage1", config, out, seed, "stage1", log_level)
    train, val = exp.load_split("train"), exp.load_split("val")
    out_dir = exp.fresh("stage1", force=force)
    result = _train_stage1(train, _stage1_config(exp), exp.config['model'], out_dir, exp.logger(out_dir),
                           val_dataset=val, config_hash=exp.record.config_hash, shape_hash=_shape_hash(exp, train))
    exp.finish(result.checkpoint_path)
    return result.checkpoint_path


def train_stage2(config: Optional[str] = None, out: Optional[str] = None, seed: Optional[int] = None,
                 force: bool = False, log_level: int = 1):
    """Trains the per-rater projection heads on top of DIR/stage1 into DIR/stage2."""
    exp = Experiment("train-stage2", config, out, seed, "stage2", log_level)
    stage1_path = exp.path("stage1", "stage1.safetensors")
    if not os.path.exists(stage1_path):
        raise ArtifactError(f"Missing stage-one checkpoint {stage1_path}; run train-stage1 first")
    train, val = exp.load_split("train"), exp.load_split("val")
    out_dir = exp.fresh("stage2", force=force)
    result = _train_stage2(train, stage1_path, Stage2Config.from_dict(exp.config['stage2']), out_dir,
                           exp.logger(out_dir), val_dataset=val, config_hash=exp.record.config_hash,
                           proj_hidden=exp.config['model']['proj_hidden'],
                           expected_shape_hash=_shape_hash(exp, train))
    exp.finish(result.checkpoint_path)
    return result.checkpoint_path


def baseline(method: str, config: Optional[str] = None, out: Optional[str] = None, seed: Optional[int] = None,
             force: bool = False, log_level: int = 1):
    """
    Trains a baseline into DIR/baselines/<method>.

    prob-unet: the stage-one trainer with beta = 0 (same budget and seed as stage1).
    mv / staple / single-rater:<i>: single-label training on fused labels.
    rs: single-label training on one uniformly drawn annotation per sample and epoch.
    """
    method = _check_method(method, ("prob-unet",) + SINGLE_METHODS)
    seed_section = "stage1" if method == "prob-unet" else "baselines"
    exp = Experiment("baseline", config, out, seed, seed_section, log_level)
    train, val = exp.load_split("train"), exp.load_split("val")
    out_dir = exp.fresh("baselines", _safe(method), force=force)
    logger = exp.logger(out_dir, run_name=_safe(method))
    ckpt_name = f"{_safe(method)}.safetensors"

    if method == "prob-unet":
        cfg = _stage1_config(exp, beta=0.0, label_source="multi")
        result = _train_stage1(train, cfg, exp.config['model'], out_dir, logger, val_dataset=val,
                               config_hash=exp.record.config_hash, shape_hash=_shape_hash(exp, train),
                               checkpoint_name=ckpt_name)
        exp.finish(result.checkpoint_path)
        return result.checkpoint_path

    b = exp.config['baselines']
    if method == "rs":
        labels = train
    else:
        fusion = "rater:" + method.split(":", 1)[1] if method.startswith("single-rater:") else method
        labels = fuse_labels(train, fusion, seed=b['seed'], max_iters=b['staple_max_iters'], tol=b['staple_tol'],
                             workers=exp.config['metrics']['workers'], logger=logger)
        labels.save(os.path.join(out_dir, f"train_{_safe(method)}.safetensors"))
    s1 = exp.config['stage1']
    cfg = Stage1Config.from_dict(dict(s1, epochs=b['epochs'], learning_rate=b['learning_rate'],
                                      batch_size=b['batch_size'], seed=b['seed'], l2=b['l2']),
                                 mode="single", label_source=method)
    result = _train_stage1(labels, cfg, exp.config['model'], out_dir, logger, val_dataset=val,
                           config_hash=exp.record.config_hash, checkpoint_name=ckpt_name)
    exp.finish(result.checkpoint_path)
    return result.checkpoint_path


def _checkpoint_for(exp: Experiment, method: str) -> str:
    if method == "stage1":
        path = exp.path("stage1", "stage1.safetensors")
    elif method == "stage2":
        path = exp.path("stage2", STAGE2_CHECKPOINT)
    else:
        path = exp.path("baselines", _safe(method), f"{_safe(method)}.safetensors")
    if not os.path.exists(path):
        raise ArtifactError(f"No checkpoint for {method} at {path}")
    return path


def evaluate(method: str, config: Optional[str] = None, out: Optional[str] = None,
             samples: Optional[Union[int, list]] = None, seed: Optional[int] = None, force: bool = False,
             log_level: int = 1):
    """Evaluates one method on the test split into DIR/eval/<method>."""
    method = _check_method(method, ("stage1", "stage2", "prob-unet") + SINGLE_METHODS)
    exp = Experiment("eval", config, out, seed, "metrics", log_level)
    test = exp.load_split("test")
    bundle, meta = load_checkpoint(_checkpoint_for(exp, method))
    if bundle.num_raters != test.num_raters and bundle.mode == "diverse":
        raise ArtifactError(f"{method} was trained with R={bundle.num_raters}, test split has R={test.num_raters}")
    out_dir = exp.fresh("eval", _safe(method), force=force)
    logger = exp.logger(out_dir, run_name=_safe(method))
    m = exp.config['metrics']

    if method in DIVERSE_METHODS:
        sampling = m['samples'] if samples is None else ([samples] if isinstance(samples, int) else list(samples))
        DiverseEval.run_diverse_eval(bundle, test, method, sampling, m['seed'], m['thresholds'], m['binarize'],
                                     m['workers'], out_dir, exp.record.config_hash, logger)
    else:
        s2 = exp.config['stage2']
        PersonalEval.run_personal_eval(bundle, test, method, s2['M'], s2['eval_bank_seed'], s2['attention_scale'],
                                       m['thresholds'], m['binarize'], out_dir, exp.record.config_hash, logger)
    exp.finish(out_dir)
    return out_dir


@torch.no_grad()
def _overlays(exp: Experiment, out_dir: str, logger: common.Logger):
    n = exp.config['metrics']['overlays']
    if n == 0 or not os.path.exists(exp.path("data", "manifest.json")):
        return
    test = exp.load_split("test")
    os.makedirs(out_dir, exist_ok=True)
    s2, seed = exp.config['stage2'], exp.config['metrics']['seed']
    for method, kind in (("stage1", "diverse"), ("prob-unet", "diverse"), ("stage2", "personal")):
        try:
            bundle, _ = load_checkpoint(_checkpoint_for(exp, method))
        except ArtifactError:
            logger.log(f"No {method} checkpoint, skipping its overlays")
            continue
        for i in range(min(n, len(test))):
            image = test.images[i:i + 1]
            anns = test.annotations[i].numpy()
            path = os.path.join(out_dir, f"{method}_{test.sample_ids[i]}.png")
            if kind == "diverse":
                gen = common.make_generator(common.derive_seed(seed, "eval", test.sample_ids[i]))
                preds = infer_diverse(bundle, image, 10, gen)[0].numpy()
                plot_diverse_overlay(image[0, 0].numpy(), preds, anns, path, title=method)
            else:
                preds = personalize_all(bundle, image, s2['M'], fixed_seed=s2['eval_bank_seed'])[0].numpy()
                plot_personal_overlay(image[0, 0].numpy(), preds, anns, path, title=method)


def report(config: Optional[str] = None, out: Optional[str] = None, force: bool = False, log_level: int = 1):
    """Collects every EvalReport under DIR/eval into one table and renders overlays."""
    exp = Experiment("report", config, out, None, None, log_level)
    reports = load_reports(exp.path("eval"))
    if not reports:
        raise ArtifactError(f"No evaluation reports under {exp.path('eval')}; run eval first")
    out_dir = exp.fresh("report", force=force)
    logger = exp.logger(out_dir)
    rows = build_table(reports, logger)
    text = format_table(rows)
    with open(os.path.join(out_dir, "table.txt"), 'w') as f:
        f.write(text + "\n")
    write_table_csv(rows, os.path.join(out_dir, "table.csv"))
    _overlays(exp, os.path.join(out_dir, "overlays"), logger)
    print(text)
    exp.finish(out_dir)
    return text


def ablate(config: Optional[str] = None, out: Optional[str] = None, seed: Optional[int] = None,
           force: bool = False, log_level: int = 1):
    """
    Stage-one variants over the K grid (beta fixed) and the beta grid (K fixed), each evaluated on the test split
    at the ablation sampling number.
    """
    exp = Experiment("ablate", config, out, seed, "stage1", log_level)
    train, val, test = exp.load_split("train"), exp.load_split("val"), exp.load_split("test")
    out_dir = exp.fresh("ablation", force=force)
    logger = exp.logger(out_dir)
    a, m = exp.config['ablation'], exp.config['metrics']
    variants = [(f"K={k}", {'K': k}) for k in a['K']] + [(f"beta={b}", {'beta': b}) for b in a['beta']]
    reports = []
    for name, override in variants:
        run_dir = os.path.join(out_dir, _safe(name.replace('=', '')))
        result = _train_stage1(train, _stage1_config(exp, **override), exp.config['model'], run_dir,
                               common.EmptyLogger(), val_dataset=val, config_hash=exp.record.config_hash)
        reports += DiverseEval.run_diverse_eval(result.bundle, test, f"stage1[{name}]", [a['samples']], m['seed'],
                                                m['thresholds'], m['binarize'], m['workers'], run_dir,
                                                exp.record.config_hash, logger)
    rows = build_table(reports, logger)
    with open(os.path.join(out_dir, "table.txt"), 'w') as f:
        f.write(format_table(rows) + "\n")
    write_table_csv(rows, os.path.join(out_dir, "table.csv"))
    exp.finish(out_dir)
    return format_table(rows)


def pipeline(config: Optional[str] = None, out: Optional[str] = None, force: bool = False, log_level: int = 1):
    """gen-data, both stages, every crowdsourcing baseline, eval of every method and the report."""
    gen_data(config, out, force=force, log_level=log_level)
    train_stage1(config, out, force=force, log_level=log_level)
    train_stage2(config, out, force=force, log_level=log_level)
    for method in ("prob-unet",) + SINGLE_METHODS:
        baseline(method, config, out, force=force, log_level=log_level)
    for method in ("stage1", "stage2", "prob-unet") + SINGLE_METHODS:
        evaluate(method, config, out, force=force, log_level=log_level)
    return report(config, out, force=force, log_level=log_level)


COMMANDS = {
    'gen-data': gen_data,
    'train-stage1': train_stage1,
    'train-stage2': train_stage2,
    'baseline': baseline,
    'eval': evaluate,
    'report': report,
    'ablate': ablate,
    'pipeline': pipeline,
}


def main():
    fire.Fire(COMMANDS)


if __name__ == "__main__":
    main()
