import tempfile
import unittest
from pathlib import Path
from unittest import mock

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from pcgp import common as rc
from pcgp import datagen, deepnet, gp_core, physics, trainer
from pcgp.trainer import TrainConfig


def _small_config(**changes) -> TrainConfig:
    base = dict(
        nx=4, ny=4, kl_modes=8, hidden=(8,), latent=3, sigma2=0.1, l=2.0,
        batch_size=6, known_count=3, epochs=2, lr=1e-2, train_count=12, val_count=4,
    )
    base.update(changes)
    return TrainConfig(**base).validate()


def _dense_kernel(A, B, l):
    return np.exp(-np.sqrt(((A[:, None, :] - B[None, :, :]) ** 2).sum(-1)) / l)


class SplitTests(unittest.TestCase):
    def test_default_sizes(self):
        split = trainer.split_batch(96, 48, seed=0)
        self.assertEqual((len(split.known), len(split.unknown)), (48, 48))

    def test_partition_holds_for_many_draws(self):
        for seed in range(1000):
            split = trainer.split_batch(10, 4, seed)
            both = np.concatenate([split.known, split.unknown])
            self.assertEqual(sorted(both.tolist()), list(range(10)))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(min_value=2, max_value=64), st.integers(min_value=0, max_value=2**32 - 1))
    def test_same_seed_same_split(self, s, seed):
        known = 1 + seed % (s - 1)
        a = trainer.split_batch(s, known, seed)
        b = trainer.split_batch(s, known, seed)
        np.testing.assert_array_equal(a.known, b.known)
        self.assertEqual(len(a.known), known)
        self.assertFalse(set(a.known.tolist()) & set(a.unknown.tolist()))

    def test_size_violation(self):
        for known in (0, 6):
            with self.assertRaises(rc.InputError):
                trainer.split_batch(6, known, 0)


class TargetScalingTests(unittest.TestCase):
    def test_standardised_targets_have_zero_mean_and_unit_pooled_variance(self):
        Y = np.random.default_rng(3).normal(0.5, 0.1, size=(40, 9))
        scaling = trainer.TargetScaling.fit(Y)
        standard = scaling.standardize(Y)
        np.testing.assert_allclose(standard.mean(axis=0), 0.0, atol=1e-12)
        self.assertAlmostEqual(float(np.mean(standard**2)), 1.0, places=12)
        np.testing.assert_allclose(scaling.restore(standard), Y, rtol=0, atol=1e-14)

    def test_noise_is_expressed_in_standard_units(self):
        scaling = trainer.TargetScaling(np.zeros(3), 0.1)
        self.assertAlmostEqual(scaling.noise(1e-4), 1e-2, places=15)

    def test_constant_targets_keep_unit_scale(self):
        scaling = trainer.TargetScaling.fit(np.ones((5, 4)))
        self.assertEqual(scaling.scale, 1.0)
        np.testing.assert_array_equal(scaling.standardize(np.ones((2, 4))), 0.0)

    def test_network_sees_scaled_log_diffusivity(self):
        D = np.exp(np.array([[0.0, 1.0, -2.0]]))
        np.testing.assert_allclose(trainer.network_inputs(D, TrainConfig(input_scale=0.5)), [[0.0, 0.5, -1.0]])
        np.testing.assert_allclose(trainer.network_inputs(D, TrainConfig(log_input=False, input_scale=2.0)), 2.0 * D)


class InferUnknownTests(unittest.TestCase):
    def setUp(self):
        self.params = deepnet.init_network([5, 4, 2, 4, 5], 2, seed=0)
        rng = np.random.default_rng(1)
        self.Xk = rng.normal(size=(4, 5))
        self.Xuk = rng.normal(size=(2, 5))
        self.Yk = rng.normal(size=(7, 4))

    def test_matches_dense_inverse_per_entry(self):
        cfg = TrainConfig(sigma2=1e-2, l=1.5)
        Yhat = trainer.infer_unknown(self.params, self.Xk, self.Yk, self.Xuk, cfg)
        self.assertEqual(Yhat.shape, (7, 2))
        Zk = deepnet.encode(self.params, self.Xk)
        Zu = deepnet.encode(self.params, self.Xuk)
        ws = gp_core.gram_matrix(Zk, 1.5, 1e-2)
        Ainv = np.linalg.inv(_dense_kernel(Zk, Zk, 1.5) + (1e-2 + ws.jitter) * np.eye(4))
        Kuk = _dense_kernel(Zu, Zk, 1.5)
        for entry in range(7):
            np.testing.assert_allclose(Yhat[entry], Kuk @ Ainv @ self.Yk[entry], rtol=1e-8, atol=1e-12)

    def test_one_factorization_for_all_entries(self):
        gp_core.reset_factorization_count()
        trainer.infer_unknown(self.params, self.Xk, self.Yk, self.Xuk, TrainConfig())
        self.assertEqual(gp_core.factorization_count(), 1)

    def test_zero_labels_give_zero_predictions(self):
        Yhat = trainer.infer_unknown(self.params, self.Xk, np.zeros((7, 4)), self.Xuk, TrainConfig())
        np.testing.assert_array_equal(Yhat, 0.0)

    def test_duplicate_of_known_point_is_interpolated(self):
        cfg = TrainConfig(sigma2=0.0, jitter=0.0)
        Xuk = self.Xk[[2]]
        Yhat = trainer.infer_unknown(self.params, self.Xk, self.Yk, Xuk, cfg)
        np.testing.assert_allclose(Yhat[:, 0], self.Yk[:, 2], atol=1e-8)

    def test_scaling_centres_the_known_labels(self):
        cfg = TrainConfig(sigma2=1e-2, l=1.5)
        shifted = self.Yk + 3.0
        scaling = trainer.TargetScaling.fit(shifted.T)
        Yhat = trainer.infer_unknown(self.params, self.Xk, shifted, self.Xuk, cfg, scaling)
        Zk = deepnet.encode(self.params, self.Xk)
        Zu = deepnet.encode(self.params, self.Xuk)
        noise = 1e-2 / scaling.scale**2
        ws = gp_core.gram_matrix(Zk, 1.5, noise)
        Ainv = np.linalg.inv(_dense_kernel(Zk, Zk, 1.5) + (noise + ws.jitter) * np.eye(4))
        standard = (shifted.T - scaling.mean) / scaling.scale
        expected = scaling.mean + scaling.scale * (_dense_kernel(Zu, Zk, 1.5) @ Ainv @ standard)
        np.testing.assert_allclose(Yhat, expected.T, rtol=1e-8, atol=1e-12)

    def test_shape_mismatch(self):
        with self.assertRaises(rc.InputError):
            trainer.infer_unknown(self.params, self.Xk, self.Yk[:, :3], self.Xuk, TrainConfig())


class BatchLossTests(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.ds = datagen.generate_dataset(4, 4, 0.2, 8, 6, seed=3)

    def setUp(self):
        self.cfg = _small_config()
        self.params = deepnet.init_network(self.cfg.layer_dims(), self.cfg.encoder_end, seed=4)
        noise = 0.05 * np.random.default_rng(2).standard_normal((6, 16))
        self.batch = trainer.make_batch(self.ds, range(6), self.cfg, noise)
        self.split = trainer.split_batch(6, 3, seed=5)

    def test_data_term_is_marginal_likelihood_per_record_and_entry(self):
        cfg = self.cfg.replace(beta=0.0, gamma=0.0)
        loss = trainer.batch_loss(self.params, self.batch, self.split, cfg)
        Z = deepnet.encode(self.params, self.batch.inputs)
        scaling = trainer.TargetScaling.fit(self.batch.targets)
        Y = scaling.standardize(self.batch.targets)
        ws = gp_core.gram_matrix(Z, cfg.l, cfg.sigma2 / scaling.scale**2, cfg.jitter)
        expected = sum(gp_core.log_marginal_nll(ws, y) for y in Y.T) / Y.size
        self.assertAlmostEqual(loss, expected, delta=1e-10 * max(1.0, abs(expected)))

    def test_gram_factorized_once_per_matrix(self):
        gp_core.reset_factorization_count()
        trainer.batch_loss(self.params, self.batch, self.split, self.cfg.replace(beta=0.0))
        self.assertEqual(gp_core.factorization_count(), 1)
        gp_core.reset_factorization_count()
        trainer.batch_loss(self.params, self.batch, self.split, self.cfg)
        # full batch plus the known half
        self.assertEqual(gp_core.factorization_count(), 2)

    def test_physics_term_uses_inferred_fields(self):
        cfg = self.cfg.replace(gamma=0.0)
        graph = trainer.HybridLoss(self.batch, self.split, cfg)
        graph.head(deepnet.encode(self.params, self.batch.inputs), None)
        known, unknown = self.split.known, self.split.unknown
        scaling = graph.scaling
        Yhat = trainer.infer_unknown(
            self.params, self.batch.inputs[known], self.batch.targets[known].T, self.batch.inputs[unknown], cfg, scaling
        )
        D = self.batch.diffusivities[unknown]
        losses, _ = physics.diffusion_vloss_batch(D, Yhat.T, 4, 4, self.batch.h)
        reference, _ = physics.diffusion_vloss_batch(D, np.broadcast_to(scaling.mean, D.shape), 4, 4, self.batch.h)
        expected = float(np.mean(losses - reference)) / scaling.scale**2
        self.assertAlmostEqual(graph.terms["physics"], expected, delta=1e-9 * max(1.0, abs(expected)))

    def test_beta_scales_only_the_physics_term(self):
        losses = {
            beta: trainer.batch_loss(self.params, self.batch, self.split, self.cfg.replace(beta=beta))
            for beta in (0.0, 1.0, 2.0)
        }
        self.assertAlmostEqual(losses[2.0] - losses[0.0], 2.0 * (losses[1.0] - losses[0.0]), delta=1e-9 * max(1.0, abs(losses[0.0])))

    def test_perfect_reconstruction_has_no_gamma_term(self):
        graph = trainer.HybridLoss(self.batch, self.split, self.cfg)
        Z = deepnet.encode(self.params, self.batch.inputs)
        _, _, dR = graph.head(Z, self.batch.inputs.copy())
        self.assertEqual(graph.terms["reconstruction"], 0.0)
        self.assertFalse(np.any(dR))

    def test_gradient_matches_finite_differences(self):
        self.assertLessEqual(self.params.count(), 500)
        cfg = self.cfg.replace(sigma2=0.01, beta=0.01)
        loss, grads = trainer.batch_loss_and_grad(self.params, self.batch, self.split, cfg)
        self.assertAlmostEqual(loss, trainer.batch_loss(self.params, self.batch, self.split, cfg), places=9)
        theta = self.params.vector()
        numeric = np.zeros_like(theta)
        h = 1e-5
        for k in range(theta.size):
            up, down = theta.copy(), theta.copy()
            up[k] += h
            down[k] -= h
            numeric[k] = (
                trainer.batch_loss(self.params.with_vector(up), self.batch, self.split, cfg)
                - trainer.batch_loss(self.params.with_vector(down), self.batch, self.split, cfg)
            ) / (2 * h)
        np.testing.assert_allclose(grads.vector(), numeric, rtol=1e-4, atol=1e-8)

    def test_huge_noise_flattens_the_loss(self):
        cfg = self.cfg.replace(beta=0.0, gamma=0.0, sigma2=1e14)
        batch = trainer.Batch(
            self.batch.inputs, None, np.zeros_like(self.batch.targets),
            self.batch.diffusivities, 4, 4, self.batch.h,
        )
        _, grads = trainer.batch_loss_and_grad(self.params, batch, self.split, cfg)
        self.assertLess(np.max(np.abs(grads.vector())), 1e-10)

    def test_single_record_batch_rejected(self):
        with self.assertRaises(rc.InputError):
            trainer.make_batch(self.ds, [0], self.cfg)


class TrainTests(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        ds = datagen.generate_dataset(4, 4, 0.2, 8, 20, seed=11)
        cls.train_ds, cls.val_ds = datagen.split_dataset(ds, [12, 4])

    def test_zero_epochs_returns_initialisation(self):
        cfg = _small_config(epochs=0)
        checkpoint, history = trainer.train(self.train_ds, self.val_ds, cfg)
        self.assertEqual(history, [])
        self.assertEqual(checkpoint.epoch, 0)
        init = deepnet.init_network(cfg.layer_dims(), cfg.encoder_end, cfg.seed)
        np.testing.assert_array_equal(checkpoint.params.vector(), init.vector())
        self.assertGreaterEqual(checkpoint.val_mse, 0.0)

    def test_history_is_reproducible_and_best_is_minimal(self):
        cfg = _small_config(epochs=3)
        first, history = trainer.train(self.train_ds, self.val_ds, cfg)
        second, again = trainer.train(self.train_ds, self.val_ds, cfg)
        self.assertEqual(history, again)
        np.testing.assert_array_equal(first.params.vector(), second.params.vector())
        self.assertEqual(len(history), 3)
        self.assertTrue(all(first.val_mse <= r.val_mse for r in history))
        self.assertEqual(history[first.epoch - 1].val_mse, first.val_mse)

    def test_training_loss_drops(self):
        cfg = _small_config(epochs=30, beta=0.0)
        _, history = trainer.train(self.train_ds, self.val_ds, cfg)
        self.assertLess(history[-1].train_loss, history[0].train_loss)

    def test_too_few_records(self):
        with self.assertRaises(rc.InputError):
            trainer.train(self.val_ds, self.val_ds, _small_config())

    def test_grid_mismatch(self):
        with self.assertRaises(rc.InputError):
            trainer.train(self.train_ds, self.val_ds, _small_config(nx=5, ny=5))

    def test_numerical_failure_reports_epoch_and_batch(self):
        failure = rc.NumericalError("non-finite loss nan", tensor="loss")
        with mock.patch("pcgp.deepnet.backprop", side_effect=failure):
            with self.assertRaisesRegex(rc.NumericalError, "epoch 1, batch 0") as ctx:
                trainer.train(self.train_ds, self.val_ds, _small_config())
        self.assertEqual(ctx.exception.tensor, "loss")

    def test_history_csv(self):
        history = [trainer.EpochRecord(1, 2.5, 0.125), trainer.EpochRecord(2, 1.0 / 3.0, 0.1)]
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "history.csv"
            trainer.write_history_csv(history, path)
            lines = path.read_text().splitlines()
        self.assertEqual(lines[0], "epoch,train_loss,val_mse")
        self.assertEqual(len(lines), 3)
        self.assertEqual(float(lines[2].split(",")[1]), 1.0 / 3.0)


class EvaluateTests(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        ds = datagen.generate_dataset(4, 4, 0.2, 8, 16, seed=21)
        cls.train_ds, cls.test_ds = datagen.split_dataset(ds, [10, 6])
        cls.cfg = _small_config()
        cls.checkpoint = trainer.Checkpoint(
            deepnet.init_network(cls.cfg.layer_dims(), cls.cfg.encoder_end, seed=2), 0, 0.0
        )

    def test_training_set_is_interpolated(self):
        cfg = self.cfg.replace(sigma2=0.0, jitter=0.0)
        metrics = trainer.evaluate(self.checkpoint, self.train_ds, self.train_ds, cfg)
        self.assertLess(metrics.test_mse, 1e-8)

    def test_baseline_equals_ensemble_variance(self):
        baseline = trainer.baseline_mse(self.train_ds, self.train_ds)
        expected = float(self.train_ds.solutions().var(axis=0).mean())
        self.assertAlmostEqual(baseline, expected, delta=1e-12)

    def test_metrics_shapes_and_errors(self):
        metrics = trainer.evaluate(self.checkpoint, self.train_ds, self.test_ds, self.cfg)
        self.assertEqual(metrics.predictions.shape, (6, 16))
        np.testing.assert_array_equal(metrics.errors, metrics.predictions - metrics.truth)
        self.assertAlmostEqual(metrics.test_mse, float(np.mean(metrics.errors**2)), places=14)
        self.assertEqual(len(metrics.probes), len(self.cfg.probes))
        report = metrics.report()
        self.assertEqual(report["test_count"], 6)
        self.assertIn("probe0_pred_mean", report)

    def test_single_row_prediction_is_bitwise_identical(self):
        queries = self.test_ds.diffusivities()
        batch = trainer.predict_fields(self.checkpoint.params, self.train_ds, queries, self.cfg)
        single = trainer.predict_fields(self.checkpoint.params, self.train_ds, queries[3:4], self.cfg)
        np.testing.assert_array_equal(batch[3], single[0])

    def test_variance_is_non_negative_and_vanishes_on_training_points(self):
        params = self.checkpoint.params
        var = trainer.predict_variance(params, self.train_ds, self.test_ds.diffusivities()[0], self.cfg)
        self.assertEqual(var.shape, (16,))
        self.assertTrue(np.all(var >= 0.0))
        cfg = self.cfg.replace(sigma2=0.0, jitter=0.0)
        var = trainer.predict_variance(params, self.train_ds, self.train_ds.diffusivities()[1], cfg)
        self.assertLess(float(var.max()), 1e-6)

    def test_uncorrelated_kernel_falls_back_to_training_mean(self):
        cfg = self.cfg.replace(l=1e-9)
        params = self.checkpoint.params
        predictions = trainer.predict_fields(params, self.train_ds, self.test_ds.diffusivities(), cfg)
        mean_field = self.train_ds.solutions().mean(axis=0)
        np.testing.assert_allclose(predictions, np.broadcast_to(mean_field, predictions.shape), atol=1e-12)
        var = trainer.predict_variance(params, self.train_ds, self.test_ds.diffusivities()[0], cfg)
        scale = trainer.TargetScaling.fit(self.train_ds.solutions()).scale
        np.testing.assert_allclose(var, scale**2, rtol=1e-12)

    def test_conditioning_subset_is_seeded(self):
        cfg = self.cfg.replace(max_conditioning=4)
        a = trainer.conditioning_indices(10, cfg)
        b = trainer.conditioning_indices(10, cfg)
        np.testing.assert_array_equal(a, b)
        self.assertEqual(len(a), 4)
        np.testing.assert_array_equal(trainer.conditioning_indices(3, cfg), [0, 1, 2])

    def test_probe_maps_to_nearest_node(self):
        self.assertEqual(trainer.probe_index(0.0, 0.0, 4, 4), 0)
        self.assertEqual(trainer.probe_index(1.0, 1.0, 4, 4), 15)
        self.assertEqual(trainer.probe_index(0.4, 0.7, 4, 4), 2 * 4 + 1)
        pred = np.arange(32.0).reshape(2, 16)
        stats = trainer.probe_statistics(pred, pred + 1.0, [(0.0, 0.0)], 4, 4)
        self.assertEqual(stats[0].pred_mean, 8.0)
        self.assertEqual(stats[0].ref_mean, 9.0)
        self.assertEqual(stats[0].pred_std, stats[0].ref_std)


if __name__ == "__main__":
    unittest.main()
