import numpy as np
import dfc.realize as realize
import dfc.tensor as T
from dfc.linalg import MatricizationSpec, matricize, dematricize
from dfc.model import LayerKind, build_toy_cnn, build_sequential, forward, hard_flops, dense_flops
from dfc.surrogate import SelectionState, layer_spec
import unittest


class Test(unittest.TestCase):
    """Tests of mask binarization, rank selection, pruning and factorization"""

    def setUp(self):
        self.rng = np.random.default_rng(5)
        self.cnn = build_toy_cnn(input_shape=(3, 8, 8), n_classes=4, channels=(4, 6, 6, 8), seed=3)

    def test_factorization_is_optimal(self):
        """the factors reach the Eckart-Young error at every rank for both schemes"""
        w = self.rng.normal(size=(5, 3, 3, 3))
        for scheme in (1, 2):
            spec = MatricizationSpec(scheme, w.shape)
            s = np.linalg.svd(matricize(w, spec), compute_uv=False)
            for rank in range(1, len(s) + 1):
                w1, w2 = realize.factorize(w, rank, scheme=scheme)
                if scheme == 1:
                    self.assertEqual((w1.shape, w2.shape), ((rank, 3, 3, 3), (5, rank, 1, 1)))
                    approx = np.einsum("or,rchw->ochw", w2[:, :, 0, 0], w1)
                else:
                    self.assertEqual((w1.shape, w2.shape), ((rank, 3, 3, 1), (5, rank, 1, 3)))
                    approx = np.einsum("orj,rci->ocij", w2[:, :, 0, :], w1[..., 0])
                error = np.linalg.norm(approx - w)
                self.assertAlmostEqual(error, np.sqrt(np.sum(s[rank:] ** 2)), delta=1e-5 * np.linalg.norm(w))

    def test_factorized_convolutions_match_truncated_weight(self):
        """running the two thin convolutions equals convolving with the truncated weight"""
        x = T.Tensor(self.rng.normal(size=(2, 3, 7, 6)), dtype=np.float64)
        w = self.rng.normal(size=(4, 3, 3, 3))
        for scheme in (1, 2):
            rank = 2
            w1, w2 = realize.factorize(w, rank, scheme=scheme)
            w1, w2 = T.Tensor(w1, dtype=np.float64), T.Tensor(w2, dtype=np.float64)
            if scheme == 1:
                out = T.conv2d(T.conv2d(x, w1, stride=2, padding=1), w2)
            else:
                vertical = T.conv2d(x, w1, stride=(2, 1), padding=(1, 0))
                out = T.conv2d(vertical, w2, stride=(1, 2), padding=(0, 1))

            spec = MatricizationSpec(scheme, w.shape)
            U, s, Vt = np.linalg.svd(matricize(w, spec), full_matrices=False)
            truncated = (U[:, :rank] * s[:rank]) @ Vt[:rank]
            truncated = T.Tensor(dematricize(truncated, spec), dtype=np.float64)
            reference = T.conv2d(x, truncated, stride=2, padding=1)
            self.assertTrue(np.allclose(out.data, reference.data, atol=1e-4))

    def test_linear_factorization(self):
        w = self.rng.normal(size=(6, 10))
        w1, w2 = realize.factorize(w, 3)
        self.assertEqual((w1.shape, w2.shape), ((3, 10), (6, 3)))
        s = np.linalg.svd(w, compute_uv=False)
        self.assertAlmostEqual(np.linalg.norm(w2 @ w1 - w), np.sqrt(np.sum(s[3:] ** 2)), places=4)

    def test_factorize_rank_limits(self):
        """ranks outside [1, min(m, n)] are refused, ranks above the numerical rank are zero padded"""
        w = self.rng.normal(size=(4, 2, 3, 3))
        with self.assertRaises(ValueError):
            realize.factorize(w, 0)
        with self.assertRaises(ValueError):
            realize.factorize(w, 5)

        low = np.outer(self.rng.normal(size=4), self.rng.normal(size=18)).reshape(4, 2, 3, 3)
        w1, w2 = realize.factorize(low, 3)
        self.assertEqual(w1.shape, (3, 2, 3, 3))
        self.assertTrue(np.allclose(w2[:, 1:], 0))
        self.assertTrue(np.allclose(np.einsum("or,rchw->ochw", w2[:, :, 0, 0], w1), low, atol=1e-5))

    def test_shrink(self):
        """shrinking lowers every kept singular value by the threshold"""
        w = self.rng.normal(size=(5, 7))
        s = np.linalg.svd(w, compute_uv=False)
        w1, w2 = realize.factorize(w, 2, shrink_gamma=0.5)
        self.assertTrue(np.allclose(np.linalg.svd(w2 @ w1, compute_uv=False)[:2], s[:2] - 0.5, atol=1e-5))

    def test_prune_matches_zeroed_filters(self):
        """removing filters gives the same logits as zeroing them in the dense network"""
        keep = {"conv0": np.array([0, 2, 3]), "conv3": np.array([1, 4]), "conv7": np.arange(6),
                "conv10": np.array([0, 5, 7])}
        pruned = realize.prune(self.cnn, keep)
        self.assertEqual(pruned["conv3"].c_in, 3)
        self.assertEqual(pruned.weights["bn4"]["gamma"].shape, (2,))

        # zeroed filters only vanish when batchnorm has no shift, as after initialisation
        zeroed = self.cnn.copy()
        for lid, kept in keep.items():
            drop = np.setdiff1d(np.arange(zeroed[lid].c_out), kept)
            zeroed.weights[lid]["weight"][drop] = 0
        x = self.rng.normal(size=(3, 3, 8, 8))
        self.assertTrue(np.allclose(forward(pruned, x).data, forward(zeroed, x).data, atol=1e-5))

    def test_prune_before_flatten(self):
        """a linear layer after a flatten loses every feature of a removed channel"""
        net = build_sequential((2, 4, 4), 3, [("conv", 4, 3, 1, 1), ("relu",), ("pool", 2), ("flatten",),
                                              ("linear", 3)], seed=1)
        pruned = realize.prune(net, {"conv0": np.array([1, 3])})
        self.assertEqual(pruned.weights["linear4"]["weight"].shape, (3, 8))
        self.assertTrue(np.array_equal(pruned.weights["linear4"]["weight"][:, :4],
                                       net.weights["linear4"]["weight"][:, 4:8]))
        zeroed = net.copy()
        zeroed.weights["conv0"]["weight"][[0, 2]] = 0
        x = self.rng.normal(size=(2, 2, 4, 4))
        self.assertTrue(np.allclose(forward(pruned, x).data, forward(zeroed, x).data, atol=1e-5))

    def test_prune_errors(self):
        for kept in (np.array([], dtype=int), np.array([0, 0]), np.array([4])):
            with self.assertRaises(ValueError):
                realize.prune(self.cnn, {"conv0": kept})

    def test_binarize_masks(self):
        """one half rounds up, and an emptied layer keeps its largest mask"""
        state = SelectionState.initial(self.cnn, mode="prune")
        state.masks["conv0"] = np.array([0.5, 0.49, 1.2, -3.0])
        state.masks["conv3"] = np.array([0.1, 0.3, 0.2, -1.0, 0.0, 0.25])
        warnings = []
        binary = realize.binarize_masks(state, warnings=warnings)
        self.assertEqual(binary["conv0"].tolist(), [True, False, True, False])
        self.assertEqual(np.flatnonzero(binary["conv3"]).tolist(), [1])
        self.assertEqual(len(warnings), 1)
        self.assertIn("conv3", warnings[0])

    def test_select_ranks(self):
        """rounded soft ranks, never below one"""
        state = SelectionState.initial(self.cnn, mode="lowrank")
        state.thresholds = {"a": 2.0, "b": 10.0}
        ranks = realize.select_ranks(state, {"a": np.array([5.0, 3.0, 1.0]), "b": np.array([5.0, 3.0])},
                                     tau={"a": 100.0, "b": 1.0})
        self.assertEqual(ranks, {"a": 2, "b": 1})

    def test_should_decompose(self):
        """factorizing must strictly reduce the cost"""
        net = build_sequential((2,), 2, [("linear", 2)])
        layer = net["linear0"]
        # r (2 + 2) = 4 = 2 * 2 at r = 1
        self.assertFalse(realize.should_decompose(layer, 2, 2, 1))
        conv = self.cnn["conv10"]
        self.assertTrue(realize.should_decompose(conv, 6, 8, 1, scheme=1))
        # 7 (9 * 6 + 8) = 434 against 9 * 6 * 8 = 432 per position
        self.assertTrue(realize.should_decompose(conv, 6, 8, 6, scheme=1))
        self.assertFalse(realize.should_decompose(conv, 6, 8, 7, scheme=1))

    def test_realize_end_to_end(self):
        """the report counts the realized network exactly"""
        state = SelectionState.initial(self.cnn)
        state.masks["conv3"][[0, 2]] = 0.0
        state.thresholds = {lid: 0.5 * state.sigma_max[lid] for lid in state.thresholds}
        compressed, plan, report = realize.realize(self.cnn, state, soft_ratio=0.4)

        self.assertEqual(compressed["conv3"].c_out, 4)
        self.assertEqual(plan.keep["conv3"].tolist(), [1, 3, 4, 5])
        self.assertEqual(plan.totals["conv3"], 6)
        self.assertEqual(report.dense_flops, dense_flops(self.cnn))
        self.assertEqual(report.hard_flops, hard_flops(compressed)[0])
        self.assertAlmostEqual(report.hard_ratio, report.hard_flops / report.dense_flops)
        self.assertLessEqual(report.hard_ratio, report.pruned_ratio)
        self.assertLess(report.pruned_ratio, 1.0)
        self.assertEqual(report.summary()["soft_ratio"], 0.4)
        self.assertLess(report.param_ratio, 1.0)

        for lid, decomposed in plan.decompose.items():
            self.assertEqual(compressed[lid].factorized, decomposed)
            self.assertGreaterEqual(plan.ranks[lid], 1)
            self.assertLessEqual(plan.ranks[lid], plan.max_ranks[lid])
        self.assertEqual(forward(compressed, np.ones((2, 3, 8, 8))).shape, (2, 4))

        table = plan.summary_table()
        self.assertEqual(len(table), 5)
        self.assertEqual(list(table["kept"]), [4, 4, 6, 8, 4])

    def test_realize_keeps_dense_network(self):
        """open masks and zero thresholds only factorize where it is cheaper at full rank"""
        state = SelectionState.initial(self.cnn, mode="prune")
        compressed, plan, report = realize.realize(self.cnn, state)
        self.assertEqual(report.hard_flops, report.dense_flops)
        self.assertEqual(report.pruned_ratio, 1.0)
        self.assertEqual(plan.ranks, {})
        self.assertFalse(any(plan.decompose.values()))

    def random_selection(self, scheme):
        """some filters dropped in most layers and thresholds inside every spectrum"""
        state = SelectionState.initial(self.cnn, scheme=scheme)
        for lid, m in state.masks.items():
            state.masks[lid] = self.rng.uniform(-0.5, 1.5, size=m.shape)
        state.thresholds = {lid: self.rng.uniform(0.1, 0.6) * state.sigma_max[lid]
                            for lid in state.thresholds}
        return state

    def test_selection_ratio_matches_report(self):
        """the ratio computed without factorizing equals the one of the realized network"""
        for scheme in (1, 2):
            for _ in range(5):
                state = self.random_selection(scheme)
                _, _, report = realize.realize(self.cnn, state)
                self.assertAlmostEqual(realize.selection_ratio(self.cnn, state), report.hard_ratio, places=12)
        dense = SelectionState.initial(self.cnn, mode="prune")
        self.assertEqual(realize.selection_ratio(self.cnn, dense), 1.0)

    def test_realized_logits_match_truncated_surrogate(self):
        """the realized network computes the dense network with binary gates and rank-r truncated weights

        Dropped channels only vanish when batchnorm has no shift, as after initialisation.
        """
        for scheme in (1, 2):
            state = self.random_selection(scheme)
            compressed, plan, _ = realize.realize(self.cnn, state)
            self.assertTrue(any(plan.decompose.values()))
            pruned = realize.prune(self.cnn, plan)

            dense, override, upstream = self.cnn.copy(), {}, np.arange(self.cnn.input_shape[0])
            for layer in self.cnn.compute_layers():
                lid, keep = layer.layer_id, plan.keep[layer.layer_id]
                w = pruned.weights[lid]["weight"].astype(np.float64)
                if plan.decompose[lid]:
                    spec = layer_spec(w.shape, scheme)
                    U, s, Vt = np.linalg.svd(matricize(w, spec), full_matrices=False)
                    r = plan.ranks[lid]
                    w = dematricize((U[:, :r] * s[:r]) @ Vt[:r], spec)
                full = np.zeros(self.cnn.weights[lid]["weight"].shape)
                if layer.kind == LayerKind.CONV:
                    columns = upstream
                else:
                    columns = (upstream[:, None] * layer.fan + np.arange(layer.fan)[None, :]).reshape(-1)
                full[np.ix_(keep, columns)] = w
                override[lid] = full
                if "bias" in dense.weights[lid]:
                    dense.weights[lid]["bias"][np.setdiff1d(np.arange(layer.c_out), keep)] = 0
                upstream = keep

            for _ in range(5):
                x = self.rng.normal(size=(4, 3, 8, 8))
                realized = forward(compressed, x).data
                reference = forward(dense, x, weight_override=override).data
                self.assertLessEqual(np.max(np.abs(realized - reference)), 1e-4)
