import unittest
import os
import sys
import tempfile
sys.path.append(os.path.dirname(os.path.realpath(__file__)) + '/../')

import torch

from dpersona.common import ArtifactError, ConfigurationError, ContractViolation, ListLogger, make_generator
from dpersona.config import DEFAULTS, shape_hash
from dpersona.latentmath import DiagonalGaussian, PriorBank
from dpersona.model import ModelBundle, load_checkpoint, save_checkpoint
from dpersona.stage1 import Stage1Config, train_stage1
from dpersona.stage2 import (FROZEN, Stage2Config, cross_attention, expert_prompt, load_stage1, personalize_all,
                             personalize_forward, prior_banks, train_stage2)
from tests.toy import TINY_MODEL, tiny_dataset


def stage2_config(**kwargs):
    base = dict(epochs=2, M=8, batch_size=4)
    base.update(kwargs)
    return Stage2Config.from_dict(DEFAULTS['stage2'], **base)


def stage1_bundle(train):
    config = Stage1Config.from_dict(DEFAULTS['stage1'], epochs=1, K=3, batch_size=4)
    return train_stage1(train, config, TINY_MODEL).bundle


class TestCrossAttention(unittest.TestCase):
    def test_equal_logits_average(self):
        bank = torch.tensor([[1.0, 3.0], [2.0, 4.0]])  # D=2, M=2
        z = torch.zeros(2)
        out, w = cross_attention(z, bank, return_weights=True)
        self.assertTrue(torch.allclose(w, torch.tensor([0.5, 0.5])))
        self.assertTrue(torch.allclose(out, torch.tensor([2.0, 3.0])))

    def test_dominant_column(self):
        bank = torch.tensor([[10.0, 0.0], [0.0, 0.0]])
        out = cross_attention(torch.tensor([5.0, 0.0]), bank)
        self.assertTrue(torch.allclose(out, torch.tensor([10.0, 0.0]), atol=1e-6))

    def test_single_column(self):
        bank = torch.tensor([[0.3], [-0.7]])
        out = cross_attention(torch.randn(2), bank)
        self.assertTrue(torch.allclose(out, bank[:, 0]))

    def test_scaled_logits(self):
        bank = torch.tensor([[1.0, -1.0], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0]])
        z = torch.tensor([1.0, 0.0, 0.0, 0.0])
        _, w = cross_attention(z, bank, scale=True, return_weights=True)
        # logits 0.5 and -0.5
        self.assertAlmostEqual(float(w[0]), float(torch.sigmoid(torch.tensor(1.0))), places=6)

    def test_output_in_convex_hull(self):
        gen = make_generator(0)
        bank = torch.randn(4, 6, 20, generator=gen)
        z = torch.randn(4, 6, generator=gen)
        out, w = cross_attention(z, PriorBank(bank), return_weights=True)
        self.assertTrue(torch.allclose(w.sum(-1), torch.ones(4)))
        self.assertTrue(torch.all(w >= 0))
        self.assertTrue(torch.all(out <= bank.amax(-1) + 1e-6))
        self.assertTrue(torch.all(out >= bank.amin(-1) - 1e-6))

    def test_convex_weights_on_random_pairs(self):
        gen = make_generator(5)
        z = 3 * torch.randn(1000, 6, generator=gen, dtype=torch.float64)
        bank = torch.randn(1000, 6, 50, generator=gen, dtype=torch.float64)
        out, w = cross_attention(z, bank, return_weights=True)
        self.assertGreaterEqual(float(w.min()), -1e-9)
        self.assertLess(float((w.sum(-1) - 1).abs().max()), 1e-6)
        self.assertTrue(torch.allclose(out, torch.einsum('bdm,bm->bd', bank, w)))

    def test_least_squares_weights_are_convex(self):
        # with M <= D the bank has full column rank, so the output fixes the mixing weights
        gen = make_generator(7)
        D = 6
        for M in range(1, D + 1):
            z = 3 * torch.randn(200, D, generator=gen, dtype=torch.float64)
            bank = torch.randn(200, D, M, generator=gen, dtype=torch.float64)
            out = cross_attention(z, bank)
            w = torch.linalg.lstsq(bank, out.unsqueeze(-1)).solution.squeeze(-1)
            self.assertGreaterEqual(float(w.min()), -1e-9, f"M={M}")
            self.assertLess(float((w.sum(-1) - 1).abs().max()), 1e-6, f"M={M}")

    def test_gradcheck(self):
        gen = make_generator(6)
        z = torch.randn(2, 6, generator=gen, dtype=torch.float64, requires_grad=True)
        bank = torch.randn(2, 6, 8, generator=gen, dtype=torch.float64, requires_grad=True)
        self.assertTrue(torch.autograd.gradcheck(cross_attention, (z, bank), eps=1e-6, atol=1e-8, rtol=1e-4))
        self.assertTrue(torch.autograd.gradcheck(lambda a, b: cross_attention(a, b, scale=True), (z, bank)))

    def test_dimension_mismatch(self):
        with self.assertRaises(ContractViolation):
            cross_attention(torch.zeros(3), torch.zeros(4, 5))

    def test_non_finite(self):
        with self.assertRaises(ContractViolation):
            cross_attention(torch.tensor([float('inf'), 0.0]), torch.ones(2, 3))

    def test_recovers_planted_column(self):
        # a trainable prompt can learn to select one column of a fixed bank
        gen = make_generator(1)
        bank = torch.randn(6, 10, generator=gen)
        target = bank[:, 3]
        z = torch.zeros(6, requires_grad=True)
        initial = float(((cross_attention(z, bank) - target) ** 2).sum())
        optimizer = torch.optim.Adam([z], lr=0.1)
        for _ in range(500):
            loss = ((cross_attention(z, bank) - target) ** 2).sum()
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        _, w = cross_attention(z, bank, return_weights=True)
        self.assertEqual(int(w.argmax()), 3)
        self.assertLess(float(loss), 0.1 * initial)


class TestPrompts(unittest.TestCase):
    def test_expert_prompt_pools(self):
        head = torch.nn.Conv2d(8, 6, kernel_size=1)
        feats = torch.randn(2, 8, 16, 16)
        z = expert_prompt(feats, head)
        self.assertEqual(tuple(z.shape), (2, 6))
        self.assertTrue(torch.allclose(z, head(feats).mean(dim=(-2, -1))))

    def test_expert_prompt_gradient(self):
        head = torch.nn.Conv2d(8, 6, kernel_size=1)
        expert_prompt(torch.randn(2, 8, 16, 16), head).sum().backward()
        self.assertIsNotNone(head.weight.grad)
        self.assertGreater(float(head.weight.grad.abs().sum()), 0.0)

    def test_expert_prompt_gradcheck(self):
        head = torch.nn.Conv2d(4, 6, kernel_size=3, padding=1).double()
        feats = torch.randn(1, 4, 8, 8, dtype=torch.float64, requires_grad=True)
        self.assertTrue(torch.autograd.gradcheck(lambda f: expert_prompt(f, head), (feats,),
                                                 eps=1e-6, atol=1e-8, rtol=1e-4))

    def test_fixed_banks_depend_on_image_only(self):
        prior = DiagonalGaussian(torch.zeros(3, 6), torch.zeros(3, 6))
        images = torch.randn(3, 1, 8, 8)
        a = prior_banks(prior, images, 5, fixed_seed=11)
        b = prior_banks(prior[1:2], images[1:2], 5, fixed_seed=11)
        self.assertEqual(tuple(a.columns.shape), (3, 6, 5))
        self.assertTrue(torch.equal(a.columns[1], b.columns[0]))
        self.assertFalse(torch.equal(a.columns[0], a.columns[1]))


class TestPersonalize(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.train = tiny_dataset(4, name="train")
        cls.bundle = stage1_bundle(cls.train)
        cls.bundle.add_projection_heads()

    def test_shapes(self):
        images = self.train.images[:2]
        all_raters = personalize_all(self.bundle, images, 8, fixed_seed=3)
        self.assertEqual(tuple(all_raters.shape), (2, 4, 32, 32))
        one = personalize_forward(self.bundle, images, 2, 8, fixed_seed=3)
        self.assertEqual(tuple(one.shape), (2, 32, 32))
        self.assertTrue(torch.allclose(one, all_raters[:, 1], atol=1e-6))

    def test_rater_index_is_one_based(self):
        images = self.train.images[:1]
        for bad in (0, 5):
            with self.assertRaises(ContractViolation):
                personalize_forward(self.bundle, images, bad, 8)

    def test_needs_heads(self):
        bare = ModelBundle(num_raters=4, **TINY_MODEL)
        with self.assertRaises(ArtifactError):
            personalize_all(bare, self.train.images[:1], 8)

    def test_resampled_banks_vary(self):
        images = self.train.images[:1]
        gen = make_generator(0)
        a = personalize_all(self.bundle, images, 8, generator=gen)
        b = personalize_all(self.bundle, images, 8, generator=gen)
        self.assertFalse(torch.equal(a, b))


class TestTrainStage2(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.train = tiny_dataset(4, name="train")
        cls.val = tiny_dataset(2, name="val")
        cls.stage1 = stage1_bundle(cls.train)

    def test_frozen_after_training(self):
        logger = ListLogger()
        before = self.stage1.checksums()
        result = train_stage2(self.train, self.stage1, stage2_config(epochs=10), logger=logger,
                              val_dataset=self.val)
        after = result.bundle.checksums()
        for name in FROZEN:
            self.assertEqual(before[name], after[name])
        self.assertEqual(result.stage1_checksums, {k: before[k] for k in FROZEN})
        self.assertEqual(len(result.history), 10)
        self.assertEqual(set(result.history[0]), {'epoch', 'l_corr', 'val_dice_mean'})
        # the caller's stage-one bundle stays untouched
        self.assertEqual(len(self.stage1.projection_heads), 0)

    def test_heads_learn(self):
        config = stage2_config(epochs=10, learning_rate=1e-2, bank_policy="fixed_per_image")
        result = train_stage2(self.train, self.stage1, config)
        self.assertLess(result.history[-1]['l_corr'], result.history[0]['l_corr'])

    def test_outputs_differ_across_raters(self):
        config = stage2_config(epochs=3, learning_rate=1e-2, bank_policy="fixed_per_image")
        bundle = train_stage2(self.train, self.stage1, config).bundle
        with torch.no_grad():
            preds = personalize_all(bundle, self.val.images, config.M, fixed_seed=config.eval_bank_seed)
        for i in range(4):
            for j in range(i + 1, 4):
                self.assertGreater(float((preds[:, i] - preds[:, j]).abs().mean()), 0.0)
        one = personalize_forward(bundle, self.val.images, 3, config.M, fixed_seed=config.eval_bank_seed)
        self.assertTrue(torch.allclose(one, preds[:, 2], atol=1e-6))

    def test_zero_epochs(self):
        result = train_stage2(self.train, self.stage1, stage2_config(epochs=0))
        self.assertEqual(result.history, [])
        self.assertEqual(len(result.bundle.projection_heads), 4)

    def test_fixed_bank_policy(self):
        result = train_stage2(self.train, self.stage1, stage2_config(bank_policy="fixed_per_image"))
        self.assertEqual(len(result.history), 2)

    def test_checkpoint(self):
        with tempfile.TemporaryDirectory() as d:
            result = train_stage2(self.train, self.stage1, stage2_config(epochs=1), out_dir=d)
            loaded, meta = load_checkpoint(result.checkpoint_path)
        self.assertEqual(meta['stage'], "stage2")
        self.assertEqual(meta['num_heads'], 4)
        self.assertEqual(meta['extra']['stage1_checksums'], result.stage1_checksums)
        self.assertEqual(loaded.checksums(), result.bundle.checksums())

    def test_checkpoint_with_custom_head_width(self):
        with tempfile.TemporaryDirectory() as d:
            result = train_stage2(self.train, self.stage1, stage2_config(epochs=1), out_dir=d, proj_hidden=4)
            loaded, meta = load_checkpoint(result.checkpoint_path)
        self.assertEqual(meta['model_config']['proj_hidden'], 4)
        self.assertEqual(tuple(loaded.projection_heads[0].net[0].weight.shape), (4, 8, 3, 3))
        self.assertEqual(loaded.checksums(), result.bundle.checksums())
        # the caller's stage-one config is not rewritten
        self.assertIsNone(self.stage1.model_config['proj_hidden'])

    def test_rejects_single_mode(self):
        single = ModelBundle(num_raters=4, mode="single", **TINY_MODEL)
        with self.assertRaises(ArtifactError):
            train_stage2(self.train, single, stage2_config())

    def test_rejects_rater_mismatch(self):
        with self.assertRaises(ArtifactError):
            load_stage1(self.stage1, tiny_dataset(2, R=3))

    def test_rejects_shape_mismatch(self):
        with tempfile.TemporaryDirectory() as d:
            path = os.path.join(d, 'stage1.safetensors')
            save_checkpoint(self.stage1, path, stage="stage1", shape_hash=shape_hash(6, 4, 64, 64))
            with self.assertRaises(ArtifactError):
                load_stage1(path, self.train)
            save_checkpoint(self.stage1, path, stage="stage1", shape_hash=shape_hash(6, 4, 32, 32))
            bundle, _ = load_stage1(path, self.train)
        self.assertEqual(bundle.checksums(), self.stage1.checksums())

    def test_rejects_latent_dim_of_current_config(self):
        with tempfile.TemporaryDirectory() as d:
            path = os.path.join(d, 'stage1.safetensors')
            save_checkpoint(self.stage1, path, stage="stage1", shape_hash=shape_hash(6, 4, 32, 32))
            with self.assertRaises(ArtifactError):
                load_stage1(path, self.train, expected_shape_hash=shape_hash(8, 4, 32, 32))
            with self.assertRaises(ArtifactError):
                train_stage2(self.train, path, stage2_config(), expected_shape_hash=shape_hash(8, 4, 32, 32))
            load_stage1(path, self.train, expected_shape_hash=shape_hash(6, 4, 32, 32))
        with self.assertRaises(ArtifactError):
            load_stage1(self.stage1, self.train, expected_shape_hash=shape_hash(8, 4, 32, 32))

    def test_missing_checkpoint(self):
        with self.assertRaises(ArtifactError):
            train_stage2(self.train, '/nonexistent/stage1.safetensors', stage2_config())

    def test_config_validation(self):
        with self.assertRaises(ConfigurationError):
            stage2_config(M=0)
        with self.assertRaises(ConfigurationError):
            stage2_config(bank_policy="sometimes")


if __name__ == '__main__':
    unittest.main()
