from unittest import TestCase

import numpy as np
from pydantic import ValidationError

from malc.blackbox import NoisyOracleConfig, knn_fit, knn_predict, knn_predict_batch, noisy_oracle
from malc.data import make_blobs
from malc.errors import DataError, ShapeError
from testbase import make_dataset


class TestKnn(TestCase):
    def test_001_memorize(self):
        ds = make_blobs(blobs=3, n=60, d=2, separation=1.0, seed=0)
        model = knn_fit(ds, 1)
        np.testing.assert_array_equal(ds.labels, knn_predict_batch(model, ds.features))

    def test_002_global_majority(self):
        ds = make_dataset([[0.0], [1.0], [2.0], [10.0]], [0, 1, 1, 1])
        model = knn_fit(ds, ds.n)
        np.testing.assert_array_equal([1, 1, 1], knn_predict_batch(model, np.array([[0.0], [-5.0], [100.0]])))

    def test_003_invalid_k(self):
        ds = make_dataset([[0.0], [1.0]], [0, 1])
        for k in (0, 3):
            with self.assertRaises(DataError):
                knn_fit(ds, k)

    def test_004_nearer_class(self):
        ds = make_dataset([[1.0], [2.0]], [0, 1])
        self.assertEqual(0, knn_predict(knn_fit(ds, 1), np.array([0.0])))

    def test_005_vote(self):
        ds = make_dataset([[0.0], [1.0], [1.5], [10.0], [11.0]], [0, 0, 1, 1, 1])
        # nearest three to 0.9: 1.0 (class 1), 1.5 (class 2), 0.0 (class 1)
        self.assertEqual(0, knn_predict(knn_fit(ds, 3), np.array([0.9])))

    def test_006_vote_tie(self):
        ds = make_dataset([[0.0], [1.0]], [1, 0])
        self.assertEqual(0, knn_predict(knn_fit(ds, 2), np.array([0.4])))

    def test_007_shape(self):
        model = knn_fit(make_dataset([[0.0, 1.0]], [0]), 1)
        with self.assertRaises(ShapeError):
            knn_predict_batch(model, np.zeros((2, 3)))
        with self.assertRaises(ShapeError):
            knn_predict(model, np.zeros((1, 2)))

    def test_008_blocks(self):
        ds = make_blobs(blobs=2, n=500, d=2, separation=3.0, seed=4)
        model = knn_fit(ds, 5)
        queries = np.random.default_rng(0).standard_normal((10000, 2))
        batch = knn_predict_batch(model, queries)
        np.testing.assert_array_equal(batch[-10:], [knn_predict(model, q) for q in queries[-10:]])


class TestNoisyOracle(TestCase):
    def test_001_no_noise(self):
        labels = np.array([0, 1, 2, 1])
        preds = noisy_oracle(labels, NoisyOracleConfig(error_rate=0.0), num_classes=3).preds
        np.testing.assert_array_equal(labels, preds)

    def test_002_always_flip(self):
        labels = np.array([0, 1, 1, 0, 1])
        preds = noisy_oracle(labels, NoisyOracleConfig(error_rate=1.0), num_classes=2).preds
        np.testing.assert_array_equal(1 - labels, preds)

    def test_003_rate(self):
        labels = np.random.default_rng(0).integers(0, 4, size=10000)
        preds = noisy_oracle(labels, NoisyOracleConfig(error_rate=0.1, seed=12), num_classes=4).preds
        self.assertAlmostEqual(0.1, float(np.mean(preds != labels)), delta=0.01)
        self.assertTrue(np.all((preds >= 0) & (preds < 4)))

    def test_004_deterministic(self):
        labels = np.arange(100) % 3
        cfg = NoisyOracleConfig(error_rate=0.3, seed=5)
        np.testing.assert_array_equal(noisy_oracle(labels, cfg, num_classes=3).preds,
                                      noisy_oracle(labels, cfg, num_classes=3).preds)

    def test_005_invalid(self):
        with self.assertRaises(ValidationError):
            NoisyOracleConfig(error_rate=1.5)
        with self.assertRaises(DataError):
            noisy_oracle(np.zeros(3, dtype=int), NoisyOracleConfig(), num_classes=1)
