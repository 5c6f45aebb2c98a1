import os
import tempfile
import unittest
from unittest import mock

import numpy as np
import torch

from stylecapsule.data import SyntheticFaceDataset, synth_generate
from stylecapsule.eval import (GaussianStats, NotPositiveSemidefinite, TooFewSamples, ablate_swap, ablate_xi,
                               consistency_error, diversity_score, eval_fid, extract_features, frechet_between_sets,
                               frechet_distance, gaussian_stats, pairwise_diversity, psd_sqrt, write_report)
from stylecapsule.nets import fingerprint
from stylecapsule.stage1 import Stage1Schedule
from stylecapsule.stage2 import StylizeConfig
from stylecapsule.style_model import Architecture
from tests.support import tiny_architecture, tiny_faces, tiny_model

SLOW = os.environ.get('STYLECAPSULE_SLOW') == '1'


def _random_stats(dim, seed, count=50):
    rng = np.random.default_rng(seed)
    return gaussian_stats(rng.normal(size=(count, dim)) @ rng.normal(size=(dim, dim)) + rng.normal(size=dim))


class FrechetCase(unittest.TestCase):
    def test_one_dimensional_closed_form(self):
        rng = np.random.default_rng(0)
        for trial in range(100):
            a, b = rng.normal(rng.normal(), rng.uniform(0.1, 3), 20), rng.normal(rng.normal(), rng.uniform(0.1, 3), 20)
            expected = (a.mean() - b.mean()) ** 2 + a.var(ddof=1) + b.var(ddof=1) - 2 * a.std(ddof=1) * b.std(ddof=1)
            with self.subTest(trial=trial):
                self.assertAlmostEqual(frechet_distance(gaussian_stats(a), gaussian_stats(b)), max(0.0, expected),
                                       delta=1e-8)

    def test_known_values(self):
        unit = GaussianStats([0.0], [[1.0]], 10)
        self.assertAlmostEqual(frechet_distance(unit, GaussianStats([1.0], [[1.0]], 10)), 1.0, places=12)
        self.assertAlmostEqual(frechet_distance(unit, GaussianStats([0.0], [[4.0]], 10)), 1.0, places=12)

    def test_identical_and_symmetric(self):
        a, b = _random_stats(6, 0), _random_stats(6, 1)
        self.assertLess(frechet_distance(a, a), 1e-6)
        self.assertGreater(frechet_distance(a, b), 0)
        self.assertAlmostEqual(frechet_distance(a, b), frechet_distance(b, a), delta=1e-6 * frechet_distance(a, b))

    def test_dimension_mismatch(self):
        with self.assertRaises(ValueError):
            frechet_distance(_random_stats(3, 0), _random_stats(4, 0))

    def test_too_few_samples(self):
        with self.assertRaises(TooFewSamples):
            gaussian_stats(np.zeros((1, 3)))
        with self.assertRaises(TooFewSamples):
            GaussianStats([0.0], [[1.0]], 1)

    def test_asymmetric_covariance(self):
        with self.assertRaises(ValueError):
            GaussianStats([0.0, 0.0], [[1.0, 0.5], [0.0, 1.0]], 5)


class PsdSqrtCase(unittest.TestCase):
    def test_diagonal_is_exact(self):
        root = psd_sqrt(np.diag([4.0, 9.0, 0.25]))
        np.testing.assert_array_equal(root, np.diag([2.0, 3.0, 0.5]))

    def test_squares_back(self):
        m = _random_stats(5, 2).cov
        root = psd_sqrt(m)
        np.testing.assert_allclose(root @ root, m, atol=1e-9)
        np.testing.assert_allclose(root, root.T, atol=1e-12)

    def test_tiny_negative_eigenvalue_clamped(self):
        root = psd_sqrt(np.diag([1.0, -1e-9]))
        np.testing.assert_array_equal(root, np.diag([1.0, 0.0]))

    def test_not_psd(self):
        with self.assertRaises(NotPositiveSemidefinite):
            psd_sqrt(np.array([[1.0, 2.0], [2.0, 1.0]]))
        with self.assertRaises(NotPositiveSemidefinite):
            psd_sqrt(np.diag([1.0, -0.1]))


class FeatureSetCase(unittest.TestCase):
    def setUp(self):
        self.model = tiny_model()
        self.embedder = self.model.embedders()[0]
        self.reference = tiny_faces(12, seed=5, profile='painterly')
        self.source = tiny_faces(10, seed=6)

    def test_reference_against_itself(self):
        with self.assertLogs(level='WARNING'):
            report = frechet_between_sets(self.reference.images, self.reference.images, self.embedder)
        self.assertLess(report.value, 1e-6)
        self.assertTrue(report.diagonal_loading)
        self.assertEqual(report.counts, (12, 12))
        self.assertEqual(report.embedder_fingerprint, fingerprint(self.embedder))

    def test_permutation_invariant(self):
        perm = torch.randperm(12, generator=torch.Generator().manual_seed(0))
        with self.assertLogs(level='WARNING'):
            a = frechet_between_sets(self.source.images, self.reference.images, self.embedder).value
            b = frechet_between_sets(self.source.images, self.reference.images[perm], self.embedder).value
        self.assertGreater(a, 0)
        self.assertAlmostEqual(a, b, delta=1e-6 * max(1.0, a))

    def test_batch_partition_invariant(self):
        whole = extract_features(self.embedder, self.reference.images, batch_size=16)
        parts = extract_features(self.embedder, self.reference.images, batch_size=5)
        self.assertEqual(whole.shape, (12, 16 + 32 + 64))
        self.assertTrue(torch.allclose(whole, parts, atol=1e-6))

    def test_eval_fid(self):
        with self.assertLogs(level='WARNING'):
            report = eval_fid(self.model, self.source, self.reference)
        self.assertGreaterEqual(report.value, 0)
        self.assertEqual(report.counts, (10, 12))
        d = report.as_dict('fid_stylized')
        self.assertEqual(d['fid_stylized_diagonal_loading'], 1)
        self.assertEqual(d['embedder_fingerprint'], fingerprint(self.embedder))


class DiversityCase(unittest.TestCase):
    def setUp(self):
        self.model = tiny_model()
        self.x = tiny_faces(3).images

    def test_equal_seeds_give_zero(self):
        self.assertEqual(diversity_score(self.model, self.x, [4, 4, 4]), 0.0)

    def test_distinct_seeds(self):
        self.assertGreater(diversity_score(self.model, self.x, [0, 1, 2]), 0.0)

    def test_too_few(self):
        with self.assertRaises(TooFewSamples):
            diversity_score(self.model, self.x, [0])
        with self.assertRaises(TooFewSamples):
            pairwise_diversity([torch.zeros(2, 3)])

    def test_pairwise_value(self):
        a, b = torch.zeros(2, 2), torch.tensor([[3.0, 4.0], [0.0, 1.0]])
        self.assertAlmostEqual(pairwise_diversity([a, b]), 3.0)

    def test_consistency_error(self):
        error = consistency_error(self.model, self.x, [0, 1])
        self.assertGreater(error, 0)
        self.assertEqual(error, consistency_error(self.model, self.x, [0, 1]))
        with self.assertRaises(TooFewSamples):
            consistency_error(self.model, self.x, [])


class ReportCase(unittest.TestCase):
    def test_write_report(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'report.txt')
            write_report(path, {'fid': 0.5, 'counts': {'a': 2, 'b': 3}, 'note': 'x', 'third': 1 / 3})
            with open(path) as hndl:
                lines = hndl.read().splitlines()
        self.assertEqual(lines, ['fid=0.5', 'counts.a=2', 'counts.b=3', 'note=x', 'third=0.3333333333'])


class AblationCase(unittest.TestCase):
    def setUp(self):
        self.style = tiny_faces(4, profile='painterly')
        self.source = tiny_faces(4, seed=1)
        self.schedule = Stage1Schedule.toy(4, 2, batch_size=2)

    def test_swap(self):
        with tempfile.TemporaryDirectory() as tmp:
            report = ablate_swap(self.style, self.source, self.schedule, seeds=(0, 1),
                                 architecture=tiny_architecture(), noise_seeds=(0, 1), out_dir=tmp)
            self.assertTrue(os.path.exists(os.path.join(tmp, 'ablate_swap.png')))
        self.assertEqual(set(report), {'swap_on.0', 'swap_off.0', 'swap_on.1', 'swap_off.1', 'swap_on_wins', 'seeds'})
        self.assertIn(report['swap_on_wins'], (0, 1, 2))
        self.assertNotEqual(report['swap_on.0'], report['swap_off.0'])

    def test_fusion_index(self):
        cfg = StylizeConfig(mode='offline', steps=2, batch_size=2)
        with tempfile.TemporaryDirectory() as tmp:
            report = ablate_xi(self.style, self.source, [1, 3], self.schedule, cfg, seeds=(0,),
                               architecture=tiny_architecture(), noise_seeds=(0, 1), out_dir=tmp)
            self.assertTrue(os.path.exists(os.path.join(tmp, 'ablate_xi.png')))
        self.assertEqual(set(report), {'id_forward.1.0', 'id_forward.3.0', 'id_sampled.1.0', 'id_sampled.3.0',
                                       'xi_trend_wins', 'seeds'})
        for key in ('id_forward.1.0', 'id_sampled.3.0'):
            self.assertTrue(0 <= report[key] <= 2)
        self.assertEqual(report['xi_trend_wins'], int(report['id_forward.3.0'] > report['id_forward.1.0']))

    def test_trend_ignores_sampled_outputs(self):
        """ Only the forward identity loss decides the trend. """
        cfg = StylizeConfig(mode='offline', steps=1, batch_size=2)
        losses = iter(torch.tensor([0.2, 0.9, 0.5, 0.1], dtype=torch.float64))
        with mock.patch('stylecapsule.eval.loss_id', side_effect=lambda *args: next(losses)):
            report = ablate_xi(self.style, self.source, [1, 3], self.schedule, cfg, seeds=(0,),
                               architecture=tiny_architecture(), noise_seeds=(0,))
        self.assertEqual((report['id_forward.1.0'], report['id_sampled.1.0']), (0.2, 0.9))
        self.assertEqual((report['id_forward.3.0'], report['id_sampled.3.0']), (0.5, 0.1))
        self.assertEqual(report['xi_trend_wins'], 1)

    def test_empty_fusion_list(self):
        with self.assertRaises(ValueError):
            ablate_xi(self.style, self.source, [], self.schedule, StylizeConfig(steps=1), seeds=(0,),
                      architecture=tiny_architecture())


@unittest.skipUnless(SLOW, 'set STYLECAPSULE_SLOW=1 for acceptance-scale runs')
class AblationTrendCase(unittest.TestCase):
    """ Three seeds on the synthetic two-profile set at resolution 16. """
    def setUp(self):
        self.style = synth_generate(SyntheticFaceDataset(0, 8, 16, 'painterly'))
        self.source = synth_generate(SyntheticFaceDataset(1, 8, 16, 'photo'))
        self.arch = Architecture.for_resolution(16, layer_dim=32, noise_dim=32, hidden=(64, 64))

    def test_swap_lowers_consistency_error(self):
        report = ablate_swap(self.style, self.source, Stage1Schedule.toy(), architecture=self.arch)
        self.assertGreaterEqual(report['swap_on_wins'], 2)

    def test_larger_fusion_index_loses_identity(self):
        """ decode(E'(x)) keeps less of the source identity when more rows are style rows. """
        cfg = StylizeConfig(mode='offline', steps=100, batch_size=4)
        report = ablate_xi(self.style, self.source, [1, 4], Stage1Schedule.toy(), cfg, architecture=self.arch)
        self.assertGreaterEqual(report['xi_trend_wins'], 2)


if __name__ == '__main__':
    unittest.main()
