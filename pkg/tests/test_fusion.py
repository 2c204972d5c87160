import unittest
import os
import sys
sys.path.append(os.path.dirname(os.path.realpath(__file__)) + '/../')

import numpy as np

from dpersona.common import ConfigurationError, ContractViolation
from dpersona.dataset import MultiRaterDataset
from dpersona.evaluation.metrics import dice
from dpersona.fusion import fuse_labels, majority_vote, random_select, staple


def planted(rng, R=4, size=32, flip=0.05, adversarial=()):
    truth = np.zeros((size, size), dtype=np.uint8)
    truth[8:24, 10:22] = 1
    anns = []
    for j in range(R):
        noise = rng.random((size, size)) < flip
        a = np.logical_xor(truth, noise)
        if j in adversarial:
            a = ~a
        anns.append(a.astype(np.uint8))
    return truth, np.stack(anns)


def toy_dataset(N=5, R=3, size=16, seed=0):
    rng = np.random.default_rng(seed)
    anns = (rng.random((N, R, size, size)) < 0.4).astype(np.uint8)
    return MultiRaterDataset(rng.standard_normal((N, 1, size, size)).astype(np.float32), anns,
                             anns[:, 0], name="toy")


class TestMajorityVote(unittest.TestCase):
    def test_ties_go_to_foreground(self):
        anns = np.array([[[1, 0]], [[0, 0]]])
        np.testing.assert_array_equal(majority_vote(anns), [[1, 0]])

    def test_odd_raters(self):
        anns = np.array([[[1, 1, 0]], [[0, 1, 0]], [[0, 1, 1]]])
        np.testing.assert_array_equal(majority_vote(anns), [[0, 1, 0]])

    def test_single_rater(self):
        a = np.array([[[1, 0], [0, 1]]])
        np.testing.assert_array_equal(majority_vote(a), a[0])

    def test_bad_shape(self):
        with self.assertRaises(ContractViolation):
            majority_vote(np.zeros((4, 4)))


class TestRandomSelect(unittest.TestCase):
    def test_uniform_over_raters(self):
        anns = np.stack([np.eye(4, dtype=np.uint8)[j].reshape(2, 2) for j in range(4)])
        rng = np.random.default_rng(0)
        counts = np.zeros(4)
        for _ in range(4000):
            counts[int(np.argmax(random_select(anns, rng).reshape(-1)))] += 1
        self.assertTrue(np.all(np.abs(counts - 1000) < 120), counts)


class TestStaple(unittest.TestCase):
    def test_unanimous(self):
        truth, _ = planted(np.random.default_rng(0))
        est = staple(np.stack([truth] * 3))
        np.testing.assert_array_equal(est.binary(), truth)
        self.assertTrue(est.converged)
        self.assertTrue(np.all(est.sensitivity > 0.99))

    def test_planted_truth_recovered(self):
        truth, anns = planted(np.random.default_rng(1), R=5, flip=0.1)
        est = staple(anns)
        self.assertGreater(dice(est.binary(), truth), 0.95)
        self.assertTrue(np.all(est.sensitivity > 0.8))
        self.assertTrue(np.all(est.specificity > 0.8))

    def test_adversarial_rater_is_discounted(self):
        truth, anns = planted(np.random.default_rng(2), R=4, flip=0.05, adversarial=(3,))
        est = staple(anns)
        self.assertGreater(dice(est.binary(), truth), 0.9)
        self.assertLess(est.sensitivity[3], 0.2)
        self.assertLess(est.specificity[3], 0.2)
        self.assertTrue(np.all(est.sensitivity[:3] > 0.8))

    def test_recovers_planted_rates(self):
        rng = np.random.default_rng(4)
        truth = np.zeros((64, 64), dtype=bool)
        truth[16:44, 20:48] = True
        sensitivity = np.array([0.95, 0.9, 0.85, 0.8])
        specificity = np.array([0.98, 0.95, 0.97, 0.9])
        anns = np.stack([np.where(truth, rng.random(truth.shape) < p, rng.random(truth.shape) > q)
                         for p, q in zip(sensitivity, specificity)])
        est = staple(anns)
        np.testing.assert_allclose(est.sensitivity, sensitivity, atol=0.05)
        np.testing.assert_allclose(est.specificity, specificity, atol=0.05)
        self.assertTrue(np.all(np.diff(est.log_likelihood) >= -1e-6 * np.abs(est.log_likelihood[1:])))

    def test_log_likelihood_never_decreases(self):
        _, anns = planted(np.random.default_rng(3), R=4, flip=0.2)
        est = staple(anns, max_iters=30, tol=0.0)
        self.assertEqual(est.iterations, 30)
        self.assertFalse(est.converged)
        diffs = np.diff(est.log_likelihood)
        self.assertTrue(np.all(diffs >= -1e-6 * np.abs(est.log_likelihood[1:])))

    def test_degenerate_inputs(self):
        empty = staple(np.zeros((3, 8, 8)))
        self.assertFalse(empty.converged)
        self.assertEqual(empty.iterations, 0)
        self.assertEqual(empty.binary().sum(), 0)
        full = staple(np.ones((3, 8, 8)))
        self.assertEqual(full.binary().sum(), 64)

    def test_needs_two_raters(self):
        with self.assertRaises(ContractViolation):
            staple(np.ones((1, 8, 8)))
        with self.assertRaises(ConfigurationError):
            staple(np.ones((2, 8, 8)), max_iters=0)


class TestFuseLabels(unittest.TestCase):
    def test_single_rater_output(self):
        ds = toy_dataset()
        for method in ("mv", "staple", "rs", "rater:2"):
            fused = fuse_labels(ds, method, seed=1)
            self.assertEqual(fused.num_raters, 1)
            self.assertEqual(len(fused), len(ds))
            self.assertEqual(fused.sample_ids, ds.sample_ids)
            self.assertTrue(np.array_equal(fused.images.numpy(), ds.images.numpy()))

    def test_rater_selection(self):
        ds = toy_dataset()
        fused = fuse_labels(ds, "rater:2")
        np.testing.assert_array_equal(fused.annotations[:, 0].numpy(), ds.annotations[:, 1].numpy())

    def test_majority_matches_direct(self):
        ds = toy_dataset()
        fused = fuse_labels(ds, "mv")
        for i in range(len(ds)):
            np.testing.assert_array_equal(fused.annotations[i, 0].numpy(), majority_vote(ds.annotations[i].numpy()))

    def test_random_selection_is_seeded(self):
        ds = toy_dataset(N=8)
        a = fuse_labels(ds, "rs", seed=3).annotations
        b = fuse_labels(ds, "rs", seed=3).annotations
        self.assertTrue(np.array_equal(a.numpy(), b.numpy()))
        for i in range(len(ds)):
            self.assertTrue(any(np.array_equal(a[i, 0].numpy(), ds.annotations[i, j].numpy()) for j in range(3)))

    def test_workers_match_serial(self):
        ds = toy_dataset(N=6)
        serial = fuse_labels(ds, "staple", workers=1).annotations.numpy()
        parallel = fuse_labels(ds, "staple", workers=2).annotations.numpy()
        np.testing.assert_array_equal(serial, parallel)

    def test_bad_methods(self):
        ds = toy_dataset()
        with self.assertRaises(ConfigurationError):
            fuse_labels(ds, "vote")
        with self.assertRaises(ContractViolation):
            fuse_labels(ds, "rater:0")
        with self.assertRaises(ContractViolation):
            fuse_labels(ds, "rater:4")


if __name__ == '__main__':
    unittest.main()
