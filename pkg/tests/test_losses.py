import unittest
from unittest import mock

import torch

from stylecapsule.latent import ShapeMismatch, fuse, split
from stylecapsule.losses import (STAGE1_PHASE1, STAGE1_PHASE2, STAGE1_TERMS, STAGE2_TERMS, STAGE2_WEIGHTS,
                                 LossReport, LossWeights, NonFiniteLoss, UndefinedCosine, gradient_penalty,
                                 loss_adv_critic, loss_adv_gen, loss_id, loss_lpips, loss_recon, loss_swap,
                                 objective_stage1, objective_stage2, wasserstein_gap)
from tests.support import gradient_agreement, tiny_model


def _double_setup(seed=0):
    model = tiny_model(seed)
    for net in model.networks().values():
        net.double()
    perceptual, identity = model.embedders()
    g = torch.Generator().manual_seed(seed)
    a = (torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64) * 2 - 1)
    b = (torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64) * 2 - 1)
    return model, perceptual.double(), identity.double(), a, b


class IdentityInputCase(unittest.TestCase):
    """ Every loss is exactly zero on its identity input. """
    def setUp(self):
        self.model, self.perceptual, self.identity, self.a, _ = _double_setup()

    def test_recon(self):
        self.assertEqual(loss_recon(self.a, self.a.clone()).item(), 0.0)

    def test_lpips(self):
        self.assertEqual(loss_lpips(self.perceptual, self.a, self.a.clone()).item(), 0.0)

    def test_id(self):
        self.assertEqual(loss_id(self.identity, self.a, self.a.clone()).item(), 0.0)

    def test_wasserstein_gap(self):
        scores = self.model.critic(self.a)
        self.assertEqual(wasserstein_gap(scores, scores.clone()).item(), 0.0)

    def test_swap(self):
        _, style = split(self.model.encoder(self.a), self.model.latent)
        self.assertEqual(loss_swap(self.model.encoder, self.model.latent, self.a, style).item(), 0.0)


class LossValueCase(unittest.TestCase):
    def test_id_range(self):
        flat = lambda x: x.flatten(1)
        a = torch.randn(3, 3, 4, 4)
        self.assertAlmostEqual(loss_id(flat, a, -a).item(), 2.0, places=6)

    def test_id_zero_norm(self):
        zeros = lambda x: torch.zeros(x.shape[0], 4)
        with self.assertRaises(UndefinedCosine):
            loss_id(zeros, torch.zeros(1, 3, 4, 4), torch.ones(1, 3, 4, 4))

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeMismatch):
            loss_recon(torch.zeros(1, 3, 4, 4), torch.zeros(2, 3, 4, 4))

    def test_gradient_penalty_of_unit_slope_critic(self):
        """ A linear critic with a unit-norm weight has gradient norm one everywhere. """
        w = torch.randn(3 * 4 * 4, dtype=torch.float64)
        w /= w.norm()
        critic = lambda x: (x.flatten(1) * w).sum(dim=1)
        real, fake = torch.randn(4, 3, 4, 4, dtype=torch.float64), torch.randn(4, 3, 4, 4, dtype=torch.float64)
        self.assertAlmostEqual(gradient_penalty(critic, real, fake).item(), 0.0, places=12)

    def test_adv_critic_without_penalty(self):
        critic = lambda x: x.flatten(1).mean(dim=1)
        real, fake = torch.ones(2, 3, 4, 4), torch.zeros(2, 3, 4, 4)
        loss, gap = loss_adv_critic(critic, real, fake, gp_weight=0.0)
        self.assertEqual(gap.item(), 1.0)
        self.assertEqual(loss.item(), -1.0)
        self.assertEqual(loss_adv_gen(critic, fake).item(), 0.0)


class GradientCase(unittest.TestCase):
    """ Autograd against central differences at resolution 8, L = 4, D = 8. """
    threshold = 0.95

    def setUp(self):
        self.model, self.perceptual, self.identity, a, self.b = _double_setup()
        self.a = a.requires_grad_(True)

    def assertGradients(self, fn, tensor):
        self.assertGreaterEqual(gradient_agreement(fn, tensor), self.threshold)

    def test_recon(self):
        self.assertGradients(lambda: loss_recon(self.a, self.b), self.a)

    def test_lpips(self):
        self.assertGradients(lambda: loss_lpips(self.perceptual, self.a, self.b), self.a)

    def test_id(self):
        self.assertGradients(lambda: loss_id(self.identity, self.a, self.b), self.a)

    def test_swap(self):
        w_z = torch.randn(2, self.model.latent.style_rows, 8, dtype=torch.float64)
        self.assertGradients(lambda: loss_swap(self.model.encoder, self.model.latent, self.a, w_z), self.a)

    def test_swap_through_remapper_and_decoder(self):
        """ The styled image and the injected rows both depend on M and D, as in style encapsulation. """
        m, latent = self.model, self.model.latent
        z = torch.randn(2, m.architecture.remapper.noise_dim, dtype=torch.float64,
                        generator=torch.Generator().manual_seed(1))
        content, _ = split(m.encoder(self.b), latent)
        content = content.detach()

        def fn():
            w_z = m.remapper(z)
            return loss_swap(m.encoder, latent, m.decoder(fuse(content, w_z, latent)), w_z)

        for name, param in (('remapper', m.remapper.layers[0].weight), ('decoder', m.decoder.to_rgb.weight)):
            with self.subTest(network=name):
                grad, = torch.autograd.grad(fn(), param)
                self.assertGreater(grad.abs().sum().item(), 0)
                self.assertGradients(fn, param)

    def test_adv_generator(self):
        self.assertGradients(lambda: loss_adv_gen(self.model.critic, self.a), self.a)

    def test_adv_critic(self):
        """ Includes the gradient penalty; the interpolation coefficients are redrawn identically per call. """
        weight = self.model.critic.fc.weight
        real, fake = self.a.detach(), self.b

        def fn():
            return loss_adv_critic(self.model.critic, real, fake, 10.0, torch.Generator().manual_seed(0))[0]

        self.assertGradients(fn, weight)


class ObjectiveCase(unittest.TestCase):
    def _terms(self, names, value=1.0):
        return {n: mock.Mock(return_value=torch.tensor(value)) for n in names}

    def test_zero_weight_terms_not_evaluated(self):
        terms = self._terms(STAGE1_TERMS)
        total, report = objective_stage1(STAGE1_PHASE2, terms)
        self.assertAlmostEqual(total.item(), 1.1, places=6)
        self.assertEqual(set(report), {'swap', 'adv_z'})
        for name in ('recon', 'lpips', 'id', 'adv_r'):
            terms[name].assert_not_called()
        terms['swap'].assert_called_once_with()

    def test_phase1_terms(self):
        terms = self._terms(STAGE1_TERMS, 2.0)
        total, report = objective_stage1(STAGE1_PHASE1, terms)
        self.assertEqual(set(report), {'adv_r', 'recon', 'lpips', 'id'})
        self.assertAlmostEqual(total.item(), 2.0 * (0.1 + 0.8 + 0.8 + 1.0), places=5)

    def test_stage2(self):
        terms = self._terms(STAGE2_TERMS)
        total, report = objective_stage2(STAGE2_WEIGHTS, terms)
        self.assertEqual(set(report), set(STAGE2_TERMS))
        self.assertAlmostEqual(total.item(), 0.5 + 0.8 + 1.0 + 0.01, places=6)

    def test_non_finite(self):
        terms = self._terms(STAGE1_TERMS)
        terms['recon'] = mock.Mock(return_value=torch.tensor(float('nan')))
        with self.assertRaises(NonFiniteLoss) as cm:
            objective_stage1(STAGE1_PHASE1, terms)
        self.assertEqual(cm.exception.term, 'recon')

    def test_all_zero(self):
        total, report = objective_stage2(LossWeights(), self._terms(STAGE2_TERMS))
        self.assertEqual(total.item(), 0.0)
        self.assertEqual(report, {})


class WeightsCase(unittest.TestCase):
    def test_schedule_constants(self):
        self.assertEqual(STAGE1_PHASE1, LossWeights(swap=0, lpips=0.8, adv_r=0.1, adv_z=0, recon=0.8, id=1))
        self.assertEqual(STAGE1_PHASE2, LossWeights(swap=1.0, lpips=0, adv_r=0, adv_z=0.1, recon=0, id=0))
        self.assertEqual(STAGE2_WEIGHTS, LossWeights(recon=0.5, lpips=0.8, id=1.0, adv_x=0.01))

    def test_validation(self):
        for bad in (-0.1, float('nan'), float('inf')):
            with self.subTest(value=bad):
                with self.assertRaises(ValueError):
                    LossWeights(recon=bad)

    def test_dict_round_trip(self):
        self.assertEqual(LossWeights.from_dict(STAGE1_PHASE1.to_dict()), STAGE1_PHASE1)

    def test_report_line(self):
        report = LossReport(stage=1, iteration=3, terms={'recon': 0.5}, critic={'loss': -1.25}, phase=1)
        self.assertEqual(report.as_line(), 'stage=1 iteration=3 phase=1 loss_recon=0.5 critic_loss=-1.25')


if __name__ == '__main__':
    unittest.main()
