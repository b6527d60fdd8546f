import sys
import os
import tempfile

# prepare sys.path for importing modules from parent directory
current = os.path.dirname(os.path.realpath(__file__))
parent = os.path.dirname(current)
sys.path.append(parent)

import unittest
import numpy as np
import metrics
import mil
import synthetic
from clinical import Task
from mil import Bag, MilHyperparams, MilModel


def random_model(d: int, h: int, m: int, C: int, seed: int) -> MilModel:
    rng = np.random.default_rng(seed)
    return MilModel(
        V=rng.normal(0.0, 0.5, size=(h, d)), b_v=rng.normal(0.0, 0.5, size=h),
        w=rng.normal(0.0, 0.5, size=h),
        W1=rng.normal(0.0, 0.5, size=(m, d)), b1=rng.normal(0.0, 0.5, size=m),
        W2=rng.normal(0.0, 0.5, size=(C, m)), b2=rng.normal(0.0, 0.5, size=C)
    )

def random_bag(n: int, d: int, seed: int, label: int = 0) -> Bag:
    rng = np.random.default_rng(seed)
    coords = np.array([(k * 10, 0) for k in range(n)])
    return Bag("B", rng.normal(0.0, 1.0, size=(n, d)), coords, label)

def numeric_gradient(bag: Bag, model: MilModel, label: int, name: str, eps: float = 1e-6) -> np.ndarray:
    param = getattr(model, name)
    gradient = np.zeros_like(param)
    for index in np.ndindex(param.shape):
        original = param[index]
        param[index] = original + eps
        plus = mil.mil_loss(mil.mil_forward(bag, model), label)
        param[index] = original - eps
        minus = mil.mil_loss(mil.mil_forward(bag, model), label)
        param[index] = original
        gradient[index] = (plus - minus) / (2 * eps)
    return gradient


class TestGradients(unittest.TestCase):

    def check(self, n: int, d: int, h: int, m: int, C: int, seed: int):
        model = random_model(d, h, m, C, seed)
        bag = random_bag(n, d, seed + 100)
        for label in range(C):
            analytic = mil.mil_gradients(bag, model, label)
            for name in mil.PARAMETER_NAMES:
                numeric = numeric_gradient(bag, model, label, name)
                self.assertEqual(analytic[name].shape, getattr(model, name).shape)
                scale = max(np.abs(analytic[name]).max(), np.abs(numeric).max(), 1e-3)
                error = np.abs(analytic[name] - numeric).max() / scale
                self.assertLess(error, 1e-5, f"{name}, label {label}, seed {seed}")

    def test_binary_head(self):
        for seed in range(3):
            self.check(n=6, d=5, h=4, m=3, C=2, seed=seed)

    def test_three_class_head(self):
        self.check(n=4, d=3, h=2, m=5, C=3, seed=11)

    def test_single_patch_bag(self):
        self.check(n=1, d=4, h=3, m=3, C=2, seed=21)

    def test_random_shapes(self):
        rng = np.random.default_rng(7)
        for trial in range(100):
            n, d, h, m = (int(v) for v in rng.integers(1, (6, 9, 5, 5)))
            C = int(rng.integers(2, 4))
            model = random_model(d, h, m, C, seed=1000 + trial)
            bag = random_bag(n, d, seed=2000 + trial)
            label = int(rng.integers(0, C))
            analytic = mil.mil_gradients(bag, model, label)
            for name in mil.PARAMETER_NAMES:
                numeric = numeric_gradient(bag, model, label, name, eps=1e-5)
                scale = max(np.abs(analytic[name]).max(), np.abs(numeric).max(), 1e-3)
                error = np.abs(analytic[name] - numeric).max() / scale
                self.assertLess(error, 1e-4, f"{name}, trial {trial}")


class TestForward(unittest.TestCase):

    def test_outputs_are_distributions(self):
        model = random_model(5, 4, 3, 3, seed=1)
        output = mil.mil_forward(random_bag(7, 5, seed=2), model)
        self.assertAlmostEqual(output.probs.sum(), 1.0, places=12)
        self.assertAlmostEqual(output.attention.sum(), 1.0, places=12)
        self.assertTrue(np.all(output.attention > 0))

    def test_single_patch_attention(self):
        model = random_model(5, 4, 3, 2, seed=3)
        output = mil.mil_forward(random_bag(1, 5, seed=4), model)
        np.testing.assert_array_equal(output.attention, [1.0])

    def test_patch_order_does_not_matter(self):
        model = random_model(5, 4, 3, 2, seed=5)
        bag = random_bag(9, 5, seed=6)
        order = np.random.default_rng(7).permutation(9)
        shuffled = Bag("B", bag.features[order], bag.coords[order])
        a, b = mil.mil_forward(bag, model), mil.mil_forward(shuffled, model)
        np.testing.assert_array_equal(a.probs, b.probs)
        np.testing.assert_array_equal(a.attention, b.attention)

    def test_duplicated_patches_do_not_matter(self):
        model = random_model(5, 4, 3, 2, seed=8)
        bag = random_bag(6, 5, seed=9)
        doubled = Bag("B", np.vstack([bag.features, bag.features]),
                      np.vstack([bag.coords, bag.coords + (0, 1)]))
        a, b = mil.mil_forward(bag, model), mil.mil_forward(doubled, model)
        np.testing.assert_allclose(b.probs, a.probs, rtol=0, atol=1e-9)

    def test_identical_rows_share_attention(self):
        model = random_model(5, 4, 3, 2, seed=10)
        row = random_bag(1, 5, seed=11).features
        single = mil.mil_forward(Bag("B", row, [(0, 0)]), model)
        for k in (2, 5):
            output = mil.mil_forward(Bag("B", np.repeat(row, k, axis=0), [(x, 0) for x in range(k)]), model)
            np.testing.assert_allclose(output.attention, np.full(k, 1.0 / k), rtol=1e-12)
            np.testing.assert_allclose(output.probs, single.probs, rtol=0, atol=1e-12)

    def test_zero_model_is_uniform(self):
        for C in (2, 3):
            output = mil.mil_forward(random_bag(6, 5, seed=12), MilModel.zeros(5, 4, 3, C))
            np.testing.assert_allclose(output.attention, np.full(6, 1.0 / 6), rtol=1e-12)
            np.testing.assert_allclose(output.probs, np.full(C, 1.0 / C), rtol=1e-12)

    def test_canonical_patch_order(self):
        bag = Bag("B", np.arange(6.0).reshape(3, 2), [(5, 1), (0, 1), (9, 0)])
        np.testing.assert_array_equal(bag.coords, [[9, 0], [0, 1], [5, 1]])
        np.testing.assert_array_equal(bag.features[:, 0], [4.0, 2.0, 0.0])

    def test_softmax_shift(self):
        values = np.array([0.5, 1.25, -2.0, 3.0])
        np.testing.assert_array_equal(mil._softmax(values), mil._softmax(values + 8.0))

    def test_dimension_mismatch(self):
        with self.assertRaises(mil.DimensionMismatchException):
            mil.mil_forward(random_bag(3, 6, seed=1), random_model(5, 4, 3, 2, seed=1))

    def test_bad_label(self):
        output = mil.mil_forward(random_bag(3, 5, seed=1), random_model(5, 4, 3, 2, seed=1))
        with self.assertRaises(mil.BadLabelException):
            mil.mil_loss(output, 2)

    def test_loss_is_clamped(self):
        model = MilModel.zeros(2, 2, 2, 2)
        model.b2[:] = (100.0, -100.0)
        output = mil.mil_forward(random_bag(2, 2, seed=1), model)
        self.assertAlmostEqual(mil.mil_loss(output, 1), -np.log(1e-7))
        gradients = mil.mil_gradients(random_bag(2, 2, seed=1), model, 1)
        self.assertTrue(all(np.all(g == 0) for g in gradients.values()))


class TestTraining(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.train_bags, _ = synthetic.make_signal_bags(200, seed=1)
        cls.test_bags, cls.test_flags = synthetic.make_signal_bags(100, seed=2)
        cls.hyperparams = MilHyperparams(learning_rate=5e-3, epochs=30, seed=7)
        cls.model = mil.mil_train(cls.train_bags, cls.hyperparams, task=Task.DIAGNOSIS)

    def test_loss_goes_down(self):
        self.assertEqual(len(self.model.loss_log), self.hyperparams.epochs)
        self.assertLess(self.model.loss_log[-1], self.model.loss_log[0])

    def test_loss_settles_over_last_epochs(self):
        tail = np.array(self.model.loss_log[-10:])
        # per-epoch means of shuffled one-bag steps jitter slightly
        self.assertTrue(np.all(np.diff(tail) <= 1e-2), tail)
        self.assertLessEqual(tail[5:].mean(), tail[:5].mean())

    def test_separates_signal_bags(self):
        scores = [mil.predict_risk(bag, self.model, Task.DIAGNOSIS).value for bag in self.test_bags]
        labels = [bag.label for bag in self.test_bags]
        self.assertGreaterEqual(metrics.roc_curve(scores, labels).auc, 0.95)

    def test_attention_concentrates_on_signal_patches(self):
        hits, positives = 0, 0
        for bag, flags in zip(self.test_bags, self.test_flags):
            if bag.label != 1:
                continue
            positives += 1
            attention = mil.mil_forward(bag, self.model).attention
            hits += bool(attention[flags].mean() >= 2.0 / bag.n)
        self.assertGreaterEqual(hits / positives, 0.9)

    def test_same_seed_same_model(self):
        bags = self.train_bags[:40]
        hyperparams = MilHyperparams(epochs=3, seed=13)
        a, b = mil.mil_train(bags, hyperparams), mil.mil_train(bags, hyperparams)
        for name in mil.PARAMETER_NAMES:
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
        self.assertEqual(a.loss_log, b.loss_log)

    def test_zero_learning_rate_keeps_initialization(self):
        bags = self.train_bags[:20]
        hyperparams = MilHyperparams(learning_rate=0.0, epochs=2, seed=3)
        trained = mil.mil_train(bags, hyperparams)
        initial = MilModel.initialize(64, 16, 16, 2, np.random.default_rng(3))
        for name in mil.PARAMETER_NAMES:
            np.testing.assert_array_equal(getattr(trained, name), getattr(initial, name))

    def test_dataset_errors(self):
        with self.assertRaises(mil.EmptyDatasetException):
            mil.mil_train([])
        single = [bag for bag in self.train_bags[:30] if bag.label == 1]
        with self.assertRaises(mil.SingleClassDatasetException):
            mil.mil_train(single)
        mixed = [random_bag(3, 4, seed=1, label=0), random_bag(3, 5, seed=2, label=1)]
        with self.assertRaises(mil.DimensionMismatchException):
            mil.mil_train(mixed)


class TestCrossValidation(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.bags, _ = synthetic.make_signal_bags(60, seed=3, dim=8)
        cls.hyperparams = MilHyperparams(attention_dim=4, hidden_dim=4, learning_rate=5e-3, epochs=4, seed=11)
        cls.cv = mil.cross_validate(cls.bags, 3, cls.hyperparams, task=Task.DIAGNOSIS)

    def test_every_slide_scored_once(self):
        held_out = [slide_id for fold in self.cv.folds for slide_id in fold.slide_ids]
        self.assertEqual(len(self.cv.folds), 3)
        self.assertEqual(sorted(held_out), sorted(bag.slide_id for bag in self.bags))
        self.assertEqual(sorted(self.cv.scores), sorted(held_out))

    def test_scores_come_from_the_fold_model(self):
        fold = self.cv.folds[0]
        held = set(fold.slide_ids)
        training = [bag for bag in sorted(self.bags, key=lambda b: b.slide_id) if bag.slide_id not in held]
        model = mil.mil_train(training, self.hyperparams, n_classes=2, task=Task.DIAGNOSIS)
        for bag in self.bags:
            if bag.slide_id in held:
                self.assertEqual(self.cv.scores[bag.slide_id], mil.predict_risk(bag, model, Task.DIAGNOSIS).value)

    def test_mean_auc(self):
        aucs = [fold.auc for fold in self.cv.folds]
        self.assertNotIn(None, aucs)
        self.assertAlmostEqual(self.cv.mean_auc, sum(aucs) / 3, places=12)

    def test_same_seed_same_split(self):
        again = mil.cross_validate(self.bags, 3, self.hyperparams, task=Task.DIAGNOSIS)
        self.assertEqual([f.slide_ids for f in again.folds], [f.slide_ids for f in self.cv.folds])
        self.assertEqual(again.scores, self.cv.scores)

    def test_subtype_reports_one_vs_rest(self):
        rng = np.random.default_rng(5)
        bags = []
        for index in range(30):
            label = index % 3
            features = rng.normal(0.0, 1.0, size=(4, 6))
            features[:, label] += 2.0
            bags.append(Bag(f"S{index:02d}", features, [(k, 0) for k in range(4)], label))
        cv = mil.cross_validate(bags, 2, MilHyperparams(attention_dim=3, hidden_dim=4, epochs=3, seed=2),
                                n_classes=3, task=Task.SUBTYPE)
        for fold in cv.folds:
            if fold.auc is not None:
                self.assertEqual(sorted(fold.class_aucs, key=str), [0, 1, 2, "mean"])
                self.assertEqual(fold.auc, fold.class_aucs["mean"])
        self.assertEqual(sorted(cv.pooled_class_aucs(), key=str), [0, 1, 2, "mean"])


class TestScoring(unittest.TestCase):

    def test_subtype_scores_first_class(self):
        model = random_model(5, 4, 3, 3, seed=8)
        bag = random_bag(4, 5, seed=9)
        probs = mil.mil_forward(bag, model).probs
        self.assertEqual(mil.predict_risk(bag, model, Task.SUBTYPE).value, probs[0])
        self.assertEqual(mil.predict_risk(bag, model, "grade_risk").value, probs[1])

    def test_predict_bags_sorted_and_parallel(self):
        model = random_model(5, 4, 3, 2, seed=8)
        bags = [Bag(f"S{k}", random_bag(3, 5, seed=k).features, [(0, 0), (1, 0), (2, 0)]) for k in (3, 1, 2)]
        serial = mil.predict_bags(bags, model, Task.OS_RISK)
        parallel = mil.predict_bags(bags, model, Task.OS_RISK, workers=3)
        self.assertEqual([s.slide_id for s in serial], ["S1", "S2", "S3"])
        self.assertEqual([s.value for s in serial], [s.value for s in parallel])

    def test_attention_heatmap(self):
        model = random_model(3, 2, 2, 2, seed=4)
        bag = Bag("B", np.eye(3), [(0, 0), (32, 0), (0, 32)])
        output = mil.mil_forward(bag, model)
        heatmap = mil.attention_heatmap(bag, output, cell=32)
        self.assertEqual(heatmap.values.shape, (2, 2))
        self.assertEqual(heatmap.values.max(), 1.0)
        self.assertEqual(heatmap.values[1, 1], 0.0)
        np.testing.assert_allclose([heatmap.values[0, 0], heatmap.values[0, 1], heatmap.values[1, 0]],
                                   output.attention / output.attention.max())

    def test_bags_from_features(self):
        slides = {"S2": (np.array([[0, 0]]), np.ones((1, 3))), "S1": (np.array([[0, 0]]), np.zeros((1, 3)))}
        self.assertEqual([b.slide_id for b in mil.bags_from_features(slides)], ["S1", "S2"])
        labelled = mil.bags_from_features(slides, {"S2": 1})
        self.assertEqual([(b.slide_id, b.label) for b in labelled], [("S2", 1)])

    def test_model_file(self):
        bags, _ = synthetic.make_signal_bags(20, seed=4, dim=6)
        model = mil.mil_train(bags, MilHyperparams(attention_dim=3, hidden_dim=4, epochs=2), task=Task.OS_RISK)
        with tempfile.TemporaryDirectory() as directory:
            path = os.path.join(directory, "model.json")
            mil.save_model(model, path)
            loaded = mil.load_model(path)
        self.assertEqual((loaded.d, loaded.h, loaded.m, loaded.C), (6, 3, 4, 2))
        self.assertEqual(loaded.task, "os_risk")
        self.assertEqual(loaded.loss_log, model.loss_log)
        for bag in bags[:5]:
            np.testing.assert_array_equal(mil.mil_forward(bag, loaded).probs, mil.mil_forward(bag, model).probs)

    def test_model_file_bad_schema(self):
        with self.assertRaises(mil.ModelFileException):
            mil.model_from_dict({"schema": 99})


if __name__ == "__main__":
    unittest.main()
