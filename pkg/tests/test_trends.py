"""
Desk-scale trend reproductions on the default synthetic benchmark. Long running; enable with DPERSONA_SLOW=1.
DPERSONA_SLOW_EPOCHS overrides the training budget of every run (default 40).
"""
import unittest
import os
import sys
import tempfile
sys.path.append(os.path.dirname(os.path.realpath(__file__)) + '/../')

import numpy as np

from dpersona.common import derive_seed, make_generator
from dpersona.config import DEFAULTS
from dpersona.dataset import MultiRaterDataset
from dpersona.evaluation.diverse_eval import DiverseEval
from dpersona.evaluation.metrics import per_rater_dice
from dpersona.evaluation.personal_eval import PersonalEval
from dpersona.stage1 import Stage1Config, infer_diverse, train_stage1
from dpersona.stage2 import Stage2Config, train_stage2
from dpersona.synthgen import build_dataset

SLOW = os.environ.get('DPERSONA_SLOW') == '1'
EPOCHS = int(os.environ.get('DPERSONA_SLOW_EPOCHS', 40))
SEEDS = (0, 1, 2)


@unittest.skipUnless(SLOW, "set DPERSONA_SLOW=1 to run the trend reproductions")
class TestTrends(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        build_dataset(DEFAULTS['synthgen'], cls.tmp.name)
        cls.train, cls.val, cls.test = (MultiRaterDataset.load(cls.tmp.name, s) for s in ('train', 'val', 'test'))
        cls.model_cfg = DEFAULTS['model']
        cls.cache = {}
        cls.stage2_cache = {}

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def stage1(self, beta: float, seed: int):
        key = (beta, seed)
        if key not in self.cache:
            config = Stage1Config.from_dict(DEFAULTS['stage1'], epochs=EPOCHS, beta=beta, seed=seed)
            self.cache[key] = train_stage1(self.train, config, self.model_cfg, val_dataset=self.val).bundle
        return self.cache[key]

    def stage2(self, seed: int):
        if seed not in self.stage2_cache:
            config = Stage2Config.from_dict(DEFAULTS['stage2'], epochs=EPOCHS, seed=seed)
            result = train_stage2(self.train, self.stage1(0.5, seed), config, val_dataset=self.val)
            self.stage2_cache[seed] = (result.bundle, config)
        return self.stage2_cache[seed]

    def diverse_report(self, beta: float, seed: int, samples=(50,)):
        return DiverseEval.run_diverse_eval(self.stage1(beta, seed), self.test, f"beta={beta}", samples, seed=seed)

    def stage1_mean_dice_per_rater(self, seed: int, n_samples: int = 50) -> np.ndarray:
        """Dice of the mean stage-one prediction against every rater, averaged over the test split."""
        bundle = self.stage1(0.5, seed)
        gen = make_generator(derive_seed(seed, "stage1-mean"))
        R = self.test.num_raters
        scores = []
        for i in range(len(self.test)):
            mean = infer_diverse(bundle, self.test.images[i:i + 1], n_samples, gen)[0].mean(0).numpy()
            anns = self.test.annotations[i].numpy() > 0.5
            scores.append(per_rater_dice(np.repeat(mean[None], R, axis=0), anns)[0])
        return np.mean(scores, axis=0)

    def test_bound_loss_improves_diversity(self):
        low = np.median([self.diverse_report(0.01, s)[0].ged for s in SEEDS])
        high = np.median([self.diverse_report(0.5, s)[0].ged for s in SEEDS])
        self.assertGreaterEqual(low - high, 0.02, f"GED beta=0.01: {low}, beta=0.5: {high}")

    def test_beats_unbounded_baseline(self):
        ours = [self.diverse_report(0.5, s)[0] for s in SEEDS]
        plain = [self.diverse_report(0.0, s)[0] for s in SEEDS]
        self.assertLess(np.median([r.ged for r in ours]), np.median([r.ged for r in plain]))
        self.assertGreater(np.median([r.dice_soft for r in ours]), np.median([r.dice_soft for r in plain]))

    def test_more_samples_do_not_hurt(self):
        small, large = self.diverse_report(0.5, 0, samples=(10, 50))
        self.assertLessEqual(large.ged, small.ged + 1e-3)

    def test_personalized_outputs_differ_across_raters(self):
        bundle, config = self.stage2(0)
        preds = PersonalEval.predict(bundle, self.test, config.M, config.eval_bank_seed)
        R = preds.shape[1]
        for i in range(R):
            for j in range(i + 1, R):
                self.assertGreater(float(np.abs(preds[:, i] - preds[:, j]).mean()), 0.0, f"raters {i + 1}, {j + 1}")

    def test_personalized_dice_beats_stage1_mean(self):
        ours, mean = [], []
        for seed in SEEDS:
            bundle, config = self.stage2(seed)
            report = PersonalEval.run_personal_eval(bundle, self.test, "stage2", config.M, config.eval_bank_seed)
            ours.append(report.dice_per_rater)
            mean.append(self.stage1_mean_dice_per_rater(seed))
        ours, mean = np.median(ours, axis=0), np.median(mean, axis=0)
        R = len(ours)
        self.assertGreaterEqual(int((ours > mean).sum()), R - 1, f"stage2 {ours}, stage1 mean {mean}")

    def test_personalization_beats_random_selection(self):
        ours, rs = [], []
        for seed in SEEDS:
            bundle, config = self.stage2(seed)
            report = PersonalEval.run_personal_eval(bundle, self.test, "stage2", config.M, config.eval_bank_seed)
            self.assertLessEqual(report.dice_match, report.dice_max)
            ours.append(report.dice_mean)

            single = Stage1Config.from_dict(DEFAULTS['stage1'], epochs=EPOCHS, seed=seed, mode="single",
                                            label_source="rs")
            baseline = train_stage1(self.train, single, self.model_cfg, val_dataset=self.val).bundle
            rs.append(PersonalEval.run_personal_eval(baseline, self.test, "rs").dice_mean)
        self.assertGreaterEqual(np.median(ours), np.median(rs))


if __name__ == '__main__':
    unittest.main()
