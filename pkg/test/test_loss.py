import math
from unittest import TestCase

import numpy as np
from hypothesis import given, settings, strategies as st

from malc.data import add_bias
from malc.errors import NonSmoothLossError
from malc.loss import ModelParams, ObjectiveConfig, PhiKind, l1_mask, lipschitz_bound, loss_eval, \
    loss_eval_reference, loss_grad, objective_eval, phi_eval, phi_grad
from malc.loss.gradcheck import gradient_check, random_instance, relative_error
from testbase import make_instance, time_it


def two_point_instance():
    """
    x=1 of class 1 (black-box right), x=-1 of class 2 (black-box wrong); w=[1, 0], theta=(0.5, 0.5)
    """
    ds, bb, part = make_instance([[1.0], [-1.0]], [0, 1], [0, 0])
    params = ModelParams(w=np.array([[1.0], [0.0]]), theta=np.array([0.5, 0.5]))
    return ds, bb, part, params


def phi_arguments(params: ModelParams, ds, bb):
    """
    every phi argument of the loss, row by row
    """
    scores = ds.features @ params.w.T
    for i in range(ds.n):
        k = ds.labels[i]
        for j in range(params.num_classes):
            if j == k:
                continue
            if bb.preds[i] == k:
                yield scores[i, k] - scores[i, j] + params.theta[j]
            else:
                yield scores[i, k] - scores[i, j] - params.theta[k]


class TestPhi(TestCase):
    def test_001_smooth_hinge(self):
        self.assertEqual(0.0, phi_eval(PhiKind.smooth_hinge, 1.0))
        self.assertEqual(0.5, phi_eval(PhiKind.smooth_hinge, 0.0))
        self.assertEqual(2.0, phi_eval(PhiKind.smooth_hinge, -1.0))

    def test_002_logistic(self):
        self.assertAlmostEqual(math.log(2), phi_eval(PhiKind.logistic, 0.0), places=12)

    def test_003_hinge(self):
        self.assertEqual(1.0, phi_eval(PhiKind.hinge, 0.0))
        self.assertEqual(0.0, phi_eval(PhiKind.hinge, 3.0))

    def test_004_grad(self):
        self.assertEqual(-1.0, phi_grad(PhiKind.smooth_hinge, 0.0))
        self.assertEqual(0.0, phi_grad(PhiKind.smooth_hinge, 2.0))
        self.assertAlmostEqual(-0.5, phi_grad(PhiKind.logistic, 0.0), places=12)

    def test_005_hinge_grad(self):
        with self.assertRaises(NonSmoothLossError) as ctx:
            phi_grad(PhiKind.hinge, 0.0)
        self.assertIn('non-smooth', str(ctx.exception))

    @settings(max_examples=200, deadline=None)
    @given(z=st.floats(min_value=-50, max_value=50), kind=st.sampled_from([PhiKind.smooth_hinge, PhiKind.logistic]))
    def test_006_grad_non_positive(self, z, kind):
        self.assertLessEqual(phi_grad(kind, z), 0.0)

    def test_007_vectorised(self):
        z = np.array([-1.0, 0.0, 1.0, 2.0])
        np.testing.assert_array_equal([2.0, 0.5, 0.0, 0.0], phi_eval(PhiKind.smooth_hinge, z))


class TestLoss(TestCase):
    def test_001_hand_example(self):
        ds, _, part, params = two_point_instance()
        self.assertAlmostEqual(0.0625, loss_eval(params, ds, part, PhiKind.smooth_hinge), places=15)
        self.assertAlmostEqual(0.0625, loss_eval_reference(params, ds, part, PhiKind.smooth_hinge), places=15)

    def test_002_zero_params(self):
        rng = np.random.default_rng(3)
        for num_classes in (2, 3, 5):
            y = rng.integers(0, num_classes, size=12)
            bb = rng.integers(0, num_classes, size=12)
            ds, _, part = make_instance(rng.standard_normal((12, 4)), y, bb, num_classes=num_classes)
            params = ModelParams.zeros(num_classes, 4)
            self.assertAlmostEqual(0.5 * (num_classes - 1), loss_eval(params, ds, part, PhiKind.smooth_hinge),
                                   places=12)

    def test_003_reference_agreement(self):
        """
        vectorised loss against the triple loop on 50 random instances
        """
        with time_it('50 reference loss evaluations'):
            for seed in range(50):
                ds, _, part, params = random_instance(np.random.default_rng(seed))
                for phi in PhiKind:
                    fast = loss_eval(params, ds, part, phi)
                    slow = loss_eval_reference(params, ds, part, phi)
                    self.assertLessEqual(abs(fast - slow), 1e-10, f'seed {seed}, {phi.value}')

    def test_004_theta_gradient(self):
        ds, _, part, params = two_point_instance()
        grad = loss_grad(params, ds, part, PhiKind.smooth_hinge)
        self.assertAlmostEqual(0.25, grad.d_theta[1], places=15)
        # the first branch sits in the flat region of phi
        self.assertEqual(0.0, grad.d_theta[0])

    def test_005_gradient_check_smooth_hinge(self):
        with time_it('gradient check smooth hinge'):
            report = gradient_check(PhiKind.smooth_hinge, instances=100, seed=0)
        self.assertTrue(report.passed, f'max scaled error {report.max_scaled_error}, seed {report.worst_seed}')

    def test_006_gradient_check_logistic(self):
        report = gradient_check(PhiKind.logistic, instances=100, seed=0)
        self.assertTrue(report.passed, f'max scaled error {report.max_scaled_error}, seed {report.worst_seed}')

    def test_007_gradient_hinge(self):
        ds, _, part, params = two_point_instance()
        with self.assertRaises(NonSmoothLossError):
            loss_grad(params, ds, part, PhiKind.hinge)
        with self.assertRaises(NonSmoothLossError):
            gradient_check(PhiKind.hinge)

    def test_008_hinge_evaluates(self):
        ds, _, part, params = two_point_instance()
        # terms (1 - 1.5)+ = 0 and (1 - 0.5)+ = 0.5
        self.assertAlmostEqual(0.25, loss_eval(params, ds, part, PhiKind.hinge), places=15)



    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2 ** 32 - 1), delta=st.floats(min_value=0.0, max_value=5.0),
           phi=st.sampled_from(list(PhiKind)))
    def test_009_theta_response_right_row(self, seed, delta, phi):
        """
        a single row the black-box gets right only has terms phi(s_k - s_j + theta_j): raising any theta_j
        cannot increase them
        """
        rng = np.random.default_rng(seed)
        num_classes = int(rng.choice([2, 3, 5]))
        x = rng.standard_normal((1, int(rng.integers(1, 4))))
        y = int(rng.integers(num_classes))
        ds, _, part = make_instance(x, [y], [y], num_classes=num_classes)
        params = ModelParams(w=rng.standard_normal((num_classes, ds.d)), theta=rng.uniform(0.0, 1.0, num_classes))
        j = int(rng.integers(num_classes))
        theta = params.theta.copy()
        theta[j] += delta
        raised = ModelParams(w=params.w, theta=theta)
        self.assertLessEqual(loss_eval(raised, ds, part, phi), loss_eval(params, ds, part, phi) + 1e-12)

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2 ** 32 - 1), delta=st.floats(min_value=0.0, max_value=5.0),
           phi=st.sampled_from(list(PhiKind)))
    def test_010_theta_response_wrong_row(self, seed, delta, phi):
        """
        a single row the black-box gets wrong only has terms phi(s_k - s_j - theta_k): they grow with the own
        class threshold and ignore the others
        """
        rng = np.random.default_rng(seed)
        num_classes = int(rng.choice([2, 3, 5]))
        x = rng.standard_normal((1, int(rng.integers(1, 4))))
        y = int(rng.integers(num_classes))
        ds, _, part = make_instance(x, [y], [(y + 1) % num_classes], num_classes=num_classes)
        params = ModelParams(w=rng.standard_normal((num_classes, ds.d)), theta=rng.uniform(0.0, 1.0, num_classes))
        base = loss_eval(params, ds, part, phi)
        theta = params.theta.copy()
        theta[y] += delta
        self.assertGreaterEqual(loss_eval(ModelParams(w=params.w, theta=theta), ds, part, phi), base - 1e-12)
        other = (y + 1) % num_classes
        theta = params.theta.copy()
        theta[other] += delta
        self.assertEqual(base, loss_eval(ModelParams(w=params.w, theta=theta), ds, part, phi))

    @settings(max_examples=200, deadline=None)
    @given(seed=st.integers(0, 2 ** 32 - 1), scale=st.sampled_from([0.1, 1.0, 100.0]),
           phi=st.sampled_from(list(PhiKind)))
    def test_011_non_negative(self, seed, scale, phi):
        """
        loss >= 0; a zero loss has every phi argument in the zero region z >= 1
        """
        ds, bb, part, params = random_instance(np.random.default_rng(seed), n_max=3)
        params = ModelParams(w=params.w * scale, theta=params.theta * scale)
        loss = loss_eval(params, ds, part, phi)
        self.assertGreaterEqual(loss, 0.0)
        if loss == 0.0 and phi != PhiKind.logistic:
            self.assertTrue(all(z >= 1.0 for z in phi_arguments(params, ds, bb)))

    def test_012_scaled_error(self):
        # absolute below magnitude 1, relative above
        np.testing.assert_allclose([1e-3, 0.1], relative_error(np.array([1e-3, 10.0]), np.array([0.0, 9.0])))


class TestObjective(TestCase):
    def test_001_hand_example(self):
        ds, _, part, params = two_point_instance()
        cfg = ObjectiveConfig(c1=0.1, c2=0.1)
        self.assertAlmostEqual(0.2625, objective_eval(params, ds, part, cfg), places=14)

    def test_002_unregularised(self):
        ds, _, part, params = two_point_instance()
        self.assertEqual(loss_eval(params, ds, part, PhiKind.smooth_hinge),
                         objective_eval(params, ds, part, ObjectiveConfig()))

    def test_003_zero_params(self):
        ds, _, part, _ = two_point_instance()
        self.assertEqual(0.5, objective_eval(ModelParams.zeros(2, 1), ds, part, ObjectiveConfig(c1=1.0, c2=1.0)))

    def test_004_negative_theta(self):
        ds, _, part, _ = two_point_instance()
        params = ModelParams(w=np.zeros((2, 1)), theta=np.array([0.1, -0.1]))
        with self.assertRaises(ValueError):
            objective_eval(params, ds, part, ObjectiveConfig())

    def test_005_bias_not_penalised(self):
        ds, bb, part, _ = two_point_instance()
        ds = add_bias(ds)
        params = ModelParams(w=np.array([[0.0, 3.0], [0.0, 0.0]]), theta=np.zeros(2))
        loss = loss_eval(params, ds, part, PhiKind.smooth_hinge)
        self.assertEqual(loss, objective_eval(params, ds, part, ObjectiveConfig(c2=1.0)))
        self.assertAlmostEqual(loss + 3.0, objective_eval(params, ds, part, ObjectiveConfig(c2=1.0,
                                                                                           penalize_bias=True)))

    def test_006_l1_mask(self):
        np.testing.assert_array_equal([True, True, False], l1_mask(3, has_bias=True, penalize_bias=False))
        np.testing.assert_array_equal([True, True, True], l1_mask(3, has_bias=True, penalize_bias=True))
        np.testing.assert_array_equal([True, True, True], l1_mask(3, has_bias=False, penalize_bias=False))

    def test_007_lipschitz_bound(self):
        ds, _, _, _ = two_point_instance()
        # (2 * 1 + 1) per row, K - 1 = 1 competitor, averaged over 2 rows
        self.assertEqual(3.0, lipschitz_bound(ds, PhiKind.smooth_hinge))
        self.assertEqual(0.75, lipschitz_bound(ds, PhiKind.logistic))

    def test_008_flatten(self):
        params = ModelParams(w=np.arange(6.0).reshape(3, 2), theta=np.array([0.1, 0.2, 0.3]))
        back = ModelParams.unflatten(params.flatten(), 3, 2)
        np.testing.assert_array_equal(params.w, back.w)
        np.testing.assert_array_equal(params.theta, back.theta)

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2 ** 32 - 1), lam=st.floats(min_value=0.01, max_value=0.99),
           phi=st.sampled_from(list(PhiKind)))
    def test_009_convex(self, seed, lam, phi):
        rng = np.random.default_rng(seed)
        ds, _, part, a = random_instance(rng)
        b = ModelParams(w=rng.standard_normal(a.w.shape), theta=rng.uniform(0.0, 1.0, a.num_classes))
        mix = ModelParams(w=lam * a.w + (1 - lam) * b.w, theta=lam * a.theta + (1 - lam) * b.theta)
        cfg = ObjectiveConfig(c1=0.1, c2=0.05, phi=phi)
        f_a, f_b = objective_eval(a, ds, part, cfg), objective_eval(b, ds, part, cfg)
        chord = lam * f_a + (1 - lam) * f_b
        self.assertLessEqual(objective_eval(mix, ds, part, cfg), chord + 1e-12 * max(1.0, chord))
