import io
import os
import tempfile
import unittest
from contextlib import redirect_stderr
from unittest import mock

import torch

from stylecapsule.data import EmptyDataset, SyntheticFaceDataset, synth_generate
from stylecapsule.losses import STAGE1_PHASE1, STAGE1_PHASE2, LossWeights, NonFiniteLoss, loss_recon
from stylecapsule.persist import load_package, save_package, scan_for_images
from stylecapsule.stage1 import IterationOutOfRange, Stage1Schedule, Stage1Trainer, encapsulate, weights_at
from stylecapsule.style_model import Architecture, StyleModel
from tests.support import tiny_architecture, tiny_faces, tiny_model

SLOW = os.environ.get('STYLECAPSULE_SLOW') == '1'


class ScheduleCase(unittest.TestCase):
    def test_full_schedule(self):
        schedule = Stage1Schedule.full()
        self.assertEqual(weights_at(schedule, 0), LossWeights(swap=0, lpips=0.8, adv_r=0.1, adv_z=0, recon=0.8, id=1))
        self.assertEqual(weights_at(schedule, 149_999), STAGE1_PHASE1)
        self.assertEqual(weights_at(schedule, 150_000), LossWeights(swap=1.0, adv_z=0.1))
        self.assertEqual(weights_at(schedule, 169_999), STAGE1_PHASE2)
        self.assertEqual((schedule.beta1, schedule.beta2, schedule.learning_rate, schedule.batch_size),
                         (0.9, 0.999, 1e-4, 4))

    def test_toy_schedule(self):
        self.assertEqual(Stage1Schedule.toy().phase_boundary, 150)
        self.assertEqual(Stage1Schedule.toy(40).phase_boundary, 30)
        schedule = Stage1Schedule.toy(20, 10)
        self.assertEqual(weights_at(schedule, 9), STAGE1_PHASE1)
        self.assertEqual(weights_at(schedule, 10), STAGE1_PHASE2)

    def test_out_of_range(self):
        schedule = Stage1Schedule.toy(20, 10)
        for iteration in (-1, 20, 10_000):
            with self.subTest(iteration=iteration):
                with self.assertRaises(IterationOutOfRange):
                    weights_at(schedule, iteration)

    def test_validation(self):
        with self.assertRaises(ValueError):
            Stage1Schedule(phase_boundary=11, total_iterations=10)
        with self.assertRaises(ValueError):
            Stage1Schedule(total_iterations=0, phase_boundary=0)

    def test_dict_round_trip(self):
        schedule = Stage1Schedule.toy(30, 12, phase2_freeze_decoder=True)
        self.assertEqual(Stage1Schedule.from_dict(schedule.to_dict()), schedule)


class StepCase(unittest.TestCase):
    def setUp(self):
        self.faces = tiny_faces()
        self.schedule = Stage1Schedule.toy(8, 4, batch_size=2)

    def _trainer(self, seed=0, schedule=None):
        return Stage1Trainer(tiny_model(seed), schedule or self.schedule, seed)

    def test_reported_terms_follow_phase(self):
        reports = self._trainer().train(self.faces)
        self.assertEqual(len(reports), 8)
        self.assertEqual(set(reports[0].terms), {'adv_r', 'recon', 'lpips', 'id'})
        self.assertEqual(reports[0].phase, 1)
        self.assertEqual(set(reports[4].terms), {'swap', 'adv_z'})
        self.assertEqual(reports[4].phase, 2)
        self.assertIn('gap_adv_r', reports[0].critic)
        self.assertIn('gap_adv_z', reports[4].critic)
        self.assertEqual([r.iteration for r in reports], list(range(1, 9)))

    def test_deterministic(self):
        a, b = self._trainer(), self._trainer()
        ra, rb = a.train(self.faces), b.train(self.faces)
        self.assertEqual([r.terms for r in ra], [r.terms for r in rb])
        self.assertEqual([r.critic for r in ra], [r.critic for r in rb])
        self.assertEqual(a.model.fingerprint(), b.model.fingerprint())

    def test_seed_sensitivity(self):
        a, b = self._trainer(0), self._trainer(1)
        a.train(self.faces)
        b.train(self.faces)
        self.assertNotEqual(a.model.checksum('encoder'), b.model.checksum('encoder'))

    def test_zero_weight_terms_skipped(self):
        trainer = self._trainer(schedule=Stage1Schedule.toy(4, 0, batch_size=2))
        with mock.patch('stylecapsule.stage1.loss_recon') as recon, mock.patch('stylecapsule.stage1.loss_lpips') as lp:
            trainer.train(self.faces)
        recon.assert_not_called()
        lp.assert_not_called()

    def test_frozen_decoder_in_phase2(self):
        schedule = Stage1Schedule.toy(4, 0, batch_size=2, phase2_freeze_decoder=True)
        trainer = self._trainer(schedule=schedule)
        before = trainer.model.checksum('decoder')
        trainer.train(self.faces)
        self.assertEqual(trainer.model.checksum('decoder'), before)
        self.assertNotEqual(trainer.model.checksum('remapper'), tiny_model(0).checksum('remapper'))

    def test_trainable_decoder_in_phase2(self):
        trainer = self._trainer(schedule=Stage1Schedule.toy(4, 0, batch_size=2))
        before = trainer.model.checksum('decoder')
        trainer.train(self.faces)
        self.assertNotEqual(trainer.model.checksum('decoder'), before)

    def test_non_finite_loss_names_term(self):
        trainer = self._trainer()
        with mock.patch('stylecapsule.stage1.loss_recon', return_value=torch.tensor(float('inf'))):
            with self.assertRaises(NonFiniteLoss) as cm:
                trainer.train(self.faces)
        self.assertEqual(cm.exception.term, 'recon')

    def test_metrics_logged(self):
        trainer = self._trainer(schedule=Stage1Schedule.toy(2, 1, batch_size=2))
        with self.assertLogs('stylecapsule.metrics', level='INFO') as logs:
            trainer.train(self.faces)
        self.assertEqual(len(logs.records), 2)
        self.assertTrue(logs.records[0].getMessage().startswith('stage=1 iteration=1 phase=1 loss_adv_r='))

    def test_reconstruction_improves(self):
        """ Phase 1 only, raised learning rate: the tiny model starts to overfit eight faces. """
        schedule = Stage1Schedule.toy(60, 60, batch_size=4, learning_rate=1e-3)
        reports = self._trainer(schedule=schedule).train(self.faces)
        first = sum(r.terms['recon'] for r in reports[:5]) / 5
        last = sum(r.terms['recon'] for r in reports[-5:]) / 5
        self.assertLess(last, first)


class ResumeCase(unittest.TestCase):
    def test_resume_matches_uninterrupted_run(self):
        faces = tiny_faces()
        schedule = Stage1Schedule.toy(10, 6, batch_size=2)
        straight = Stage1Trainer(tiny_model(5), schedule, 5)
        straight.train(faces)

        with tempfile.TemporaryDirectory() as tmp:
            first = Stage1Trainer(tiny_model(5), schedule, 5)
            first.train(faces, until=4)
            first.checkpoint(os.path.join(tmp, 'ckpt'))
            resumed = Stage1Trainer.resume(os.path.join(tmp, 'ckpt'))
            self.assertEqual(resumed.iteration, 4)
            resumed.train(faces)
        self.assertEqual(resumed.iteration, 10)
        for name in straight.model.networks():
            with self.subTest(network=name):
                self.assertEqual(resumed.model.checksum(name), straight.model.checksum(name))

    def test_checkpoint_cadence(self):
        with tempfile.TemporaryDirectory() as tmp:
            trainer = Stage1Trainer(tiny_model(), Stage1Schedule.toy(20, 10, batch_size=2), 0)
            trainer.train(tiny_faces(), checkpoint_dir=tmp)
            self.assertEqual(sorted(os.listdir(tmp)), [f'iter_{i:07d}' for i in range(2, 21, 2)])


class EncapsulateCase(unittest.TestCase):
    def setUp(self):
        self.faces = tiny_faces()
        self.schedule = Stage1Schedule.toy(6, 3, batch_size=2)

    def test_package_reproduces_model(self):
        model = encapsulate(self.faces, self.schedule, 0, tiny_architecture())
        self.assertEqual(model.history['stage1']['final_iteration'], 6)
        self.assertEqual(model.iteration, 6)
        x = self.faces.images[:2]
        with tempfile.TemporaryDirectory() as tmp:
            save_package(model, os.path.join(tmp, 'pkg'))
            loaded = load_package(os.path.join(tmp, 'pkg'))
            self.assertEqual(scan_for_images(tmp), [])
        with torch.no_grad():
            expected = model.decoder(model.encoder(x))
            actual = loaded.decoder(loaded.encoder(x))
        self.assertTrue(torch.equal(actual, expected))
        self.assertEqual(loaded.history['stage1']['schedule'], self.schedule.to_dict())

    def test_same_seed_same_bytes(self):
        with tempfile.TemporaryDirectory() as tmp:
            for name in ('a', 'b'):
                save_package(encapsulate(self.faces, self.schedule, 3, tiny_architecture()), os.path.join(tmp, name))
            for root, _, files in os.walk(os.path.join(tmp, 'a')):
                for f in files:
                    path = os.path.join(root, f)
                    with open(path, 'rb') as ha, open(path.replace(f'{tmp}/a', f'{tmp}/b'), 'rb') as hb:
                        self.assertEqual(ha.read(), hb.read(), path)

    def test_without_critic(self):
        model = encapsulate(self.faces, self.schedule, 0, tiny_architecture(), keep_critic=False)
        self.assertIsNone(model.critic)
        self.assertNotIn('critic', model.networks())

    def test_progress_bar_on_stderr(self):
        for progress in (False, True):
            err = io.StringIO()
            with redirect_stderr(err):
                encapsulate(self.faces, self.schedule, 0, tiny_architecture(), progress=progress)
            with self.subTest(progress=progress):
                if progress:
                    self.assertRegex(err.getvalue(), r'encapsulate: 100%.*6/6')
                else:
                    self.assertEqual(err.getvalue(), '')

    def test_empty_dataset(self):
        empty = mock.MagicMock()
        empty.__len__.return_value = 0
        with self.assertRaises(EmptyDataset):
            encapsulate(empty, self.schedule, 0)

    def test_resolution_mismatch(self):
        with self.assertRaises(ValueError):
            encapsulate(self.faces, self.schedule, 0, tiny_architecture(resolution=16))


@unittest.skipUnless(SLOW, 'set STYLECAPSULE_SLOW=1 for acceptance-scale runs')
class OverfitAcceptanceCase(unittest.TestCase):
    def test_reconstruction_halves(self):
        """ 8 style images at resolution 64, the 200-iteration toy schedule. """
        faces = synth_generate(SyntheticFaceDataset(0, 8, 64, 'painterly'))
        arch = Architecture.for_resolution(64, layer_dim=64, noise_dim=64, hidden=(128, 128))
        trainer = Stage1Trainer(StyleModel.build(arch, 0), Stage1Schedule.toy(), 0)
        reports = trainer.train(faces)
        early = sum(r.terms['recon'] for r in reports[:10]) / 10
        with torch.no_grad():
            final = loss_recon(trainer.model.decoder(trainer.model.encoder(faces.images)), faces.images).item()
        self.assertTrue(all(torch.isfinite(torch.tensor(list(r.terms.values()))).all() for r in reports))
        self.assertLess(final, 0.5 * early)


if __name__ == '__main__':
    unittest.main()
