import numpy as np
from dfc.config import RunConfig
from dfc.experiments import run_pipeline, mode_ablation, scheme_comparison
from dfc.io import synth_dataset
from dfc.model import build_toy_cnn, ModelGraph
import unittest


class Test(unittest.TestCase):
    """Tests of the pipeline and ablation helpers"""

    def setUp(self):
        self.cnn = build_toy_cnn(input_shape=(3, 8, 8), n_classes=4, channels=(4, 6, 6, 8), seed=2)
        data = synth_dataset(1, shape=(3, 8, 8), n_classes=4, n=48)
        self.train, self.test = data.subset(slice(0, 32)), data.subset(slice(32, 48))
        self.config = RunConfig({"finetune_epochs": 0, "max_restarts": 0, "batch_size": 32})

    def test_run_pipeline(self):
        result = run_pipeline(self.cnn, self.train, self.test, self.config)
        self.assertIsInstance(result["model"], ModelGraph)
        # no fine-tuning epochs means the realized network is the final one
        self.assertEqual(result["accuracy"], result["realized_accuracy"])
        self.assertLessEqual(result["hard_ratio"], result["pruned_ratio"])
        for key in ("baseline_accuracy", "accuracy"):
            self.assertTrue(0.0 <= result[key] <= 1.0)

    def test_mode_ablation(self):
        """one row per mode, overridden keys first and no networks"""
        table = mode_ablation(self.cnn, self.train, self.test, budgets=(0.5,), config=self.config)
        self.assertEqual(len(table), 3)
        self.assertEqual(table.colnames[:2], ["budget", "mode"])
        self.assertEqual(list(table["mode"]), ["hybrid", "prune", "lowrank"])
        self.assertNotIn("model", table.colnames)
        self.assertTrue(np.all(table["hard_ratio"] <= 1.0))

    def test_scheme_comparison(self):
        table = scheme_comparison(self.cnn, self.train, self.test, config=self.config)
        self.assertEqual(list(table["scheme"]), [1, 2])
        # the shared settings are left alone
        self.assertEqual(self.config["scheme"], 1)
