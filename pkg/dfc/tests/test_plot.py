import importlib.util
import numpy as np
from astropy.table import Table
from dfc.model import build_toy_cnn
from dfc.realize import realize
from dfc.surrogate import SelectionState
import unittest


@unittest.skipUnless(importlib.util.find_spec("matplotlib"), "plotting needs matplotlib")
class Test(unittest.TestCase):
    """Tests of the plotting functions"""

    def setUp(self):
        import matplotlib
        matplotlib.use("Agg")

    def test_plot_run_log(self):
        from dfc.plot import plot_run_log
        log = Table({"iteration": np.arange(5), "loss": np.linspace(2, 1, 5),
                     "flop_ratio": np.linspace(0.9, 0.5, 5)})
        fig, ax = plot_run_log(log, budget=0.5, show=False, title="run")
        self.assertEqual(ax.get_title(), "run")
        # ratio and budget
        self.assertEqual(len(ax.get_lines()), 2)

    def test_plot_plan(self):
        from dfc.plot import plot_plan
        cnn = build_toy_cnn(input_shape=(3, 8, 8), n_classes=4, channels=(4, 6, 6, 8), seed=3)
        state = SelectionState.initial(cnn)
        state.thresholds = {lid: 0.5 * state.sigma_max[lid] for lid in state.thresholds}
        _, plan, _ = realize(cnn, state)
        fig, ax = plot_plan(plan, show=False)
        self.assertEqual(len(ax.get_xticklabels()), 5)
