""" Style encapsulation.

    Trains encoder, decoder and remapper on the style dataset alone, alternating one critic update with one joint
    generator update per iteration.  The loss weights follow a two-phase schedule: reconstruction with an
    adversarial term first, then the swapping loss with the adversarial term on noise-styled images.

    The trainer only ever sees batches drawn from the dataset it is given; the resulting StyleModel holds weights and
    provenance, never images.
"""
import logging
import os
import sys
from dataclasses import dataclass, asdict

import torch
from tqdm import tqdm

from stylecapsule.data import EmptyDataset, batches
from stylecapsule.latent import fuse, split
from stylecapsule.losses import (STAGE1_PHASE1, STAGE1_PHASE2, LossReport, LossWeights, NonFiniteLoss,
                                 loss_adv_critic, loss_adv_gen, loss_id, loss_lpips, loss_recon, loss_swap,
                                 objective_stage1)
from stylecapsule.persist import load_checkpoint, save_checkpoint
from stylecapsule.style_model import Architecture, StyleModel, derive_seed
from stylecapsule.nets import Critic

metrics = logging.getLogger('stylecapsule.metrics')

FULL_BOUNDARY = 150_000
FULL_TOTAL = 170_000
TOY_TOTAL = 200
TOY_BOUNDARY = 150


@dataclass(frozen=True)
class Stage1Schedule:
    """ Loss weights per phase, iteration counts and Adam settings for style encapsulation. """
    phase1_weights: LossWeights = STAGE1_PHASE1
    phase2_weights: LossWeights = STAGE1_PHASE2
    phase_boundary: int = TOY_BOUNDARY
    total_iterations: int = TOY_TOTAL
    batch_size: int = 4
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    gp_weight: float = 10.0
    phase2_freeze_decoder: bool = False

    def __post_init__(self):
        if self.total_iterations < 1:
            raise ValueError(f"Total iterations must be positive, got {self.total_iterations}.")
        if not 0 <= self.phase_boundary <= self.total_iterations:
            raise ValueError(f"Phase boundary {self.phase_boundary} must lie in [0, {self.total_iterations}].")
        if self.batch_size < 1:
            raise ValueError(f"Batch size must be positive, got {self.batch_size}.")

    @classmethod
    def full(cls, **overrides) -> "Stage1Schedule":
        return cls(**{'phase_boundary': FULL_BOUNDARY, 'total_iterations': FULL_TOTAL, **overrides})

    @classmethod
    def toy(cls, total_iterations: int = TOY_TOTAL, phase_boundary: int | None = None, **overrides):
        """ Scaled-down schedule; the boundary defaults to three quarters of the run (150 of 200). """
        if phase_boundary is None:
            phase_boundary = round(total_iterations * TOY_BOUNDARY / TOY_TOTAL)
        return cls(phase_boundary=phase_boundary, total_iterations=total_iterations, **overrides)

    def to_dict(self) -> dict:
        d = asdict(self)
        d['phase1_weights'] = self.phase1_weights.to_dict()
        d['phase2_weights'] = self.phase2_weights.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Stage1Schedule":
        d = dict(d)
        d['phase1_weights'] = LossWeights.from_dict(d['phase1_weights'])
        d['phase2_weights'] = LossWeights.from_dict(d['phase2_weights'])
        return cls(**d)


def weights_at(schedule: Stage1Schedule, iteration: int) -> LossWeights:
    """ Phase 1 weights before the boundary, phase 2 weights from the boundary on.

        Raises:
            IterationOutOfRange: iteration outside [0, total_iterations).
    """
    if not 0 <= iteration < schedule.total_iterations:
        raise IterationOutOfRange(f"Iteration {iteration} outside [0, {schedule.total_iterations}).")
    return schedule.phase1_weights if iteration < schedule.phase_boundary else schedule.phase2_weights


class Stage1Trainer:
    """ Holds the model being encapsulated, both optimizers and the trainer's random generator. """
    def __init__(self, model: StyleModel, schedule: Stage1Schedule, seed: int):
        self.model = model
        self.schedule = schedule
        self.seed = seed
        self.iteration = 0
        if model.critic is None:
            model.critic = Critic(model.architecture.critic, derive_seed(seed, 'critic'))
        self.perceptual, self.identity = model.embedders()
        self.rng = torch.Generator().manual_seed(derive_seed(seed, 'stage1'))
        betas = (schedule.beta1, schedule.beta2)
        generator_params = [*model.encoder.parameters(), *model.decoder.parameters(), *model.remapper.parameters()]
        self.opt_g = torch.optim.Adam(generator_params, lr=schedule.learning_rate, betas=betas)
        self.opt_d = torch.optim.Adam(model.critic.parameters(), lr=schedule.learning_rate, betas=betas)
        model.history['stage1'] = {'schedule': schedule.to_dict(), 'seed': seed}

    def sample_noise(self, n: int) -> torch.Tensor:
        return torch.randn(n, self.model.architecture.remapper.noise_dim, generator=self.rng)

    def _critic_step(self, weights: LossWeights, y: torch.Tensor, z: torch.Tensor,
                     y_prime: torch.Tensor) -> dict[str, float]:
        m, latent = self.model, self.model.latent
        active = weights.active(('adv_r', 'adv_z'))
        if not active:
            return {}
        with torch.no_grad():
            codes = m.encoder(y)
            fakes = {}
            if 'adv_r' in active:
                fakes['adv_r'] = m.decoder(codes)
            if 'adv_z' in active:
                content, _ = split(codes, latent)
                fakes['adv_z'] = m.decoder(fuse(content, m.remapper(z), latent))
        self.opt_d.zero_grad(set_to_none=True)
        total, report = 0.0, {}
        for name, fake in fakes.items():
            loss, gap = loss_adv_critic(m.critic, y_prime, fake, self.schedule.gp_weight, self.rng)
            total = total + loss / len(fakes)
            report[f'gap_{name}'] = float(gap.detach())
        if not torch.isfinite(total):
            raise NonFiniteLoss('critic', float(total.detach()))
        total.backward()
        self.opt_d.step()
        report['loss'] = float(total.detach())
        return report

    def step(self, y: torch.Tensor, z: torch.Tensor, y_prime: torch.Tensor) -> LossReport:
        """ One critic update followed by one joint update of encoder, decoder and remapper.

            Args:
                y (torch.Tensor): Style batch.
                z (torch.Tensor): Noise batch, N x d_z.
                y_prime (torch.Tensor): Independently drawn style batch, the critic's real samples.
            Returns:
                LossReport: Values of every term with non-zero weight at this iteration.
            Raises:
                NonFiniteLoss: Names the first term that went NaN or infinite.
        """
        weights = weights_at(self.schedule, self.iteration)
        phase = 1 if self.iteration < self.schedule.phase_boundary else 2
        m, latent = self.model, self.model.latent
        critic_report = self._critic_step(weights, y, z, y_prime)

        cache = {}

        def codes():
            if 'codes' not in cache:
                cache['codes'] = m.encoder(y)
            return cache['codes']

        def reconstruction():
            if 'y_r' not in cache:
                cache['y_r'] = m.decoder(codes())
            return cache['y_r']

        def styled():
            if 'y_z' not in cache:
                content, _ = split(codes(), latent)
                w_z = m.remapper(z)
                cache['w_z'], cache['y_z'] = w_z, m.decoder(fuse(content, w_z, latent))
            return cache['y_z'], cache['w_z']

        terms = {
            'adv_r': lambda: loss_adv_gen(m.critic, reconstruction()),
            'adv_z': lambda: loss_adv_gen(m.critic, styled()[0]),
            'recon': lambda: loss_recon(reconstruction(), y),
            'lpips': lambda: loss_lpips(self.perceptual, reconstruction(), y),
            'id': lambda: loss_id(self.identity, reconstruction(), y),
            'swap': lambda: loss_swap(m.encoder, latent, *styled()),
        }
        m.critic.requires_grad_(False)
        try:
            self.opt_g.zero_grad(set_to_none=True)
            total, report = objective_stage1(weights, terms)
            if report:
                total.backward()
            if phase == 2 and self.schedule.phase2_freeze_decoder:
                for p in m.decoder.parameters():
                    p.grad = None
            self.opt_g.step()
        finally:
            m.critic.requires_grad_(True)

        self.iteration += 1
        m.iteration = self.iteration
        result = LossReport(stage=1, iteration=self.iteration, terms=report, critic=critic_report, phase=phase)
        metrics.info(result.as_line())
        return result

    def train(self, dataset, until: int | None = None, checkpoint_dir: str | None = None,
              progress: bool = False) -> list[LossReport]:
        """ Run iterations until `until` (default: the schedule's total), resuming from self.iteration.

            Batches for y and y' come from two independently shuffled streams over the same dataset; both are pure
            functions of the seed and the iteration, so an interrupted run continues exactly where it stopped.
            With `progress` a bar counting iterations is drawn on standard error.
        """
        until = self.schedule.total_iterations if until is None else min(until, self.schedule.total_iterations)
        bs = self.schedule.batch_size
        ys = batches(dataset, bs, derive_seed(self.seed, 'y'), start=self.iteration)
        y_primes = batches(dataset, bs, derive_seed(self.seed, 'y_prime'), start=self.iteration)
        cadence = max(1, self.schedule.total_iterations // 10)
        reports = []
        with tqdm(total=until, initial=self.iteration, desc='encapsulate', unit='it', file=sys.stderr,
                  disable=not progress) as pbar:
            while self.iteration < until:
                y, y_prime = next(ys), next(y_primes)
                reports.append(self.step(y, self.sample_noise(bs), y_prime))
                pbar.update(1)
                pbar.set_postfix(phase=reports[-1].phase)
                if checkpoint_dir and (self.iteration % cadence == 0
                                       or self.iteration == self.schedule.total_iterations):
                    self.checkpoint(os.path.join(checkpoint_dir, f'iter_{self.iteration:07d}'))
        return reports

    def training_state(self) -> dict:
        return {
            'kind': 'stage1',
            'seed': self.seed,
            'iteration': self.iteration,
            'schedule': self.schedule.to_dict(),
            'opt_g': self.opt_g.state_dict(),
            'opt_d': self.opt_d.state_dict(),
            'rng': self.rng.get_state(),
        }

    def checkpoint(self, path: str):
        save_checkpoint(path, self.model, self.training_state())

    @classmethod
    def resume(cls, path: str) -> "Stage1Trainer":
        model, state = load_checkpoint(path)
        if state.get('kind') != 'stage1':
            raise ValueError(f"{path!r} is not a style encapsulation checkpoint.")
        trainer = cls(model, Stage1Schedule.from_dict(state['schedule']), int(state['seed']))
        trainer.opt_g.load_state_dict(state['opt_g'])
        trainer.opt_d.load_state_dict(state['opt_d'])
        trainer.rng.set_state(state['rng'])
        trainer.iteration = int(state['iteration'])
        return trainer


def encapsulate(style_dataset, schedule: Stage1Schedule, seed: int, architecture: Architecture | None = None,
                checkpoint_dir: str | None = None, resume_from: str | None = None,
                keep_critic: bool = True, progress: bool = False) -> StyleModel:
    """ Train a style model on the style dataset only.

        Args:
            style_dataset: ImageDataset of style images.
            schedule (Stage1Schedule): Weights, iterations and optimizer settings.
            seed (int): Run seed; every network and stream derives from it.
            architecture (Architecture): Defaults to Architecture.for_resolution(dataset resolution).
            checkpoint_dir (str): When given, checkpoints are written every total/10 iterations and at the end.
            resume_from (str): Checkpoint to continue; schedule and seed come from the checkpoint.
            keep_critic (bool): Keep the critic in the package for a stage 2 warm start.
            progress (bool): Draw a progress bar on standard error.
        Returns:
            StyleModel: Encoder, decoder, remapper (and critic) with a manifest-ready history.
        Raises:
            EmptyDataset: The style dataset has no images.
    """
    if len(style_dataset) == 0:
        raise EmptyDataset("The style dataset is empty.")
    if resume_from:
        trainer = Stage1Trainer.resume(resume_from)
        logging.info(f'Resuming style encapsulation from {resume_from} at iteration {trainer.iteration}.')
    else:
        architecture = architecture or Architecture.for_resolution(style_dataset.resolution)
        if architecture.resolution != style_dataset.resolution:
            raise ValueError(f"Dataset resolution {style_dataset.resolution} differs from architecture "
                             f"resolution {architecture.resolution}.")
        trainer = Stage1Trainer(StyleModel.build(architecture, seed), schedule, seed)
    trainer.train(style_dataset, checkpoint_dir=checkpoint_dir, progress=progress)
    model = trainer.model
    if not keep_critic:
        model.critic = None
    model.history['stage1']['final_iteration'] = trainer.iteration
    model.history['stage1']['dataset_size'] = len(style_dataset)
    return model


class IterationOutOfRange(ValueError):
    """ Indicates an iteration outside the schedule. """
    pass
