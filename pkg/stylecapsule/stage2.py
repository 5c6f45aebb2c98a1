""" Face stylization.

    Adapts a copy of the style model's encoder to the source domain.  The decoder and remapper stay frozen, and so
    does a second copy of the encoder: decode(E_frozen(x)) is what the critic treats as real, decode(E'(x)) is the
    output being trained.  Reconstruction, perceptual and identity terms compare x with x' = decode(E'(x)).

    Three modes share one update step:

        offline     shuffled batches from a source folder
        online      batch size 1, images in arrival order; the model is usable after every step
        test_time   a fixed number of steps on one input, then one forward pass
"""
import copy
import logging
import os
import sys
from dataclasses import dataclass, asdict
from typing import Callable, Iterable

import torch
from tqdm import tqdm

from stylecapsule.data import EmptyDataset, batches
from stylecapsule.latent import ShapeMismatch, fuse, split
from stylecapsule.losses import (STAGE2_WEIGHTS, LossReport, LossWeights, NonFiniteLoss, loss_adv_critic,
                                 loss_adv_gen, loss_id, loss_lpips, loss_recon, objective_stage2)
from stylecapsule.nets import Critic, Encoder
from stylecapsule.persist import load_checkpoint, load_package, save_checkpoint
from stylecapsule.style_model import StyleModel, derive_seed

metrics = logging.getLogger('stylecapsule.metrics')

MODES = ('offline', 'online', 'test_time')
TEST_TIME_STEPS = 50
TRAINING_STEPS = 20_000
TRAINED_NETWORKS = ('encoder', 'critic')

# Choices the stage 2 objective leaves open, recorded in every adapted model's history.
CRITIC_REAL = 'frozen_pipeline_output'


@dataclass(frozen=True)
class StylizeConfig:
    """ Mode, step count and optimizer settings for stage 2.

        steps defaults to 50 in test_time mode and 20000 otherwise; online mode always runs with batch size 1.
        cumulative only matters for test_time over several inputs: False resets the encoder per input.
    """
    mode: str = 'offline'
    steps: int | None = None
    batch_size: int = 4
    weights: LossWeights = STAGE2_WEIGHTS
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    gp_weight: float = 10.0
    cumulative: bool = False

    def __post_init__(self):
        mode = self.mode.replace('-', '_')
        if mode not in MODES:
            raise ModeError(f"Unknown stylization mode {self.mode!r}; expected one of {MODES}.")
        object.__setattr__(self, 'mode', mode)
        if self.steps is None:
            object.__setattr__(self, 'steps', TEST_TIME_STEPS if mode == 'test_time' else TRAINING_STEPS)
        if self.steps < 1:
            raise ValueError(f"Steps must be positive, got {self.steps}.")
        if mode in ('online', 'test_time') and self.batch_size != 1:
            if mode == 'online':
                logging.warning(f'Online mode trains with batch size 1; ignoring batch size {self.batch_size}.')
            object.__setattr__(self, 'batch_size', 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d['weights'] = self.weights.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StylizeConfig":
        return cls(**{**d, 'weights': LossWeights.from_dict(d['weights'])})


def clone_encoder(model: StyleModel) -> tuple[Encoder, Encoder]:
    """ Two weight-identical copies of the model's encoder, sharing no storage.

        Returns:
            tuple: (E_frozen, E_trainable); E_frozen has requires_grad off on every parameter.
    """
    frozen = copy.deepcopy(model.encoder)
    frozen.requires_grad_(False)
    trainable = copy.deepcopy(model.encoder)
    trainable.requires_grad_(True)
    return frozen, trainable


class Stage2Trainer:
    """ One adaptation session: trainable encoder and critic over a frozen copy of the style model. """
    def __init__(self, model: StyleModel, cfg: StylizeConfig, seed: int, source_path: str | None = None):
        self.cfg = cfg
        self.seed = seed
        self.iteration = 0
        self.source_path = source_path
        self.source_checksums = {name: model.checksum(name) for name in ('encoder', 'decoder', 'remapper')}
        self.frozen_encoder, trainable = clone_encoder(model)
        if model.critic is not None:
            critic, critic_init = copy.deepcopy(model.critic), 'warm_start'
        else:
            critic = Critic(model.architecture.critic, derive_seed(seed, 'stage2_critic'))
            critic_init = 'fresh'
        self.model = StyleModel(
            architecture=model.architecture,
            encoder=trainable,
            decoder=copy.deepcopy(model.decoder).requires_grad_(False),
            remapper=copy.deepcopy(model.remapper).requires_grad_(False),
            critic=critic.requires_grad_(True),
            seed=model.seed,
            iteration=0,
            history=copy.deepcopy(model.history),
        )
        self.perceptual, self.identity = model.embedders()
        self.rng = torch.Generator().manual_seed(derive_seed(seed, 'stage2'))
        betas = (cfg.beta1, cfg.beta2)
        self.opt_e = torch.optim.Adam(self.model.encoder.parameters(), lr=cfg.learning_rate, betas=betas)
        self.opt_d = torch.optim.Adam(self.model.critic.parameters(), lr=cfg.learning_rate, betas=betas)
        self.model.history['stage2'] = {
            'mode': cfg.mode,
            'config': cfg.to_dict(),
            'seed': seed,
            'source_checksums': self.source_checksums,
            'decisions': {
                'critic_real': CRITIC_REAL,
                'critic_init': critic_init,
                'test_time_reset': not cfg.cumulative,
            },
        }

    def _critic_step(self, x: torch.Tensor) -> dict[str, float]:
        if self.cfg.weights.adv_x == 0:
            return {}
        m = self.model
        with torch.no_grad():
            real = m.decoder(self.frozen_encoder(x))
            fake = m.decoder(m.encoder(x))
        self.opt_d.zero_grad(set_to_none=True)
        loss, gap = loss_adv_critic(m.critic, real, fake, self.cfg.gp_weight, self.rng)
        if not torch.isfinite(loss):
            raise NonFiniteLoss('critic', float(loss.detach()))
        loss.backward()
        self.opt_d.step()
        return {'loss': float(loss.detach()), 'gap_adv_x': float(gap.detach())}

    def step(self, x: torch.Tensor) -> LossReport:
        """ One critic update, then one update of the trainable encoder.

            Args:
                x (torch.Tensor): N x 3 x R x R source batch.
            Returns:
                LossReport: Terms with non-zero weight.
            Raises:
                NonFiniteLoss: A term went NaN or infinite.
        """
        m = self.model
        critic_report = self._critic_step(x)
        cache = {}

        def stylized():
            if 'x_prime' not in cache:
                cache['x_prime'] = m.decoder(m.encoder(x))
            return cache['x_prime']

        terms = {
            'adv_x': lambda: loss_adv_gen(m.critic, stylized()),
            'recon': lambda: loss_recon(stylized(), x),
            'lpips': lambda: loss_lpips(self.perceptual, stylized(), x),
            'id': lambda: loss_id(self.identity, stylized(), x),
        }
        m.critic.requires_grad_(False)
        try:
            self.opt_e.zero_grad(set_to_none=True)
            total, report = objective_stage2(self.cfg.weights, terms)
            if report:
                total.backward()
            self.opt_e.step()
        finally:
            m.critic.requires_grad_(True)

        self.iteration += 1
        m.iteration = self.iteration
        result = LossReport(stage=2, iteration=self.iteration, terms=report, critic=critic_report)
        metrics.info(f'mode={self.cfg.mode} {result.as_line()}')
        return result

    def finish(self) -> StyleModel:
        self.model.history['stage2']['steps'] = self.iteration
        return self.model

    def training_state(self) -> dict:
        return {
            'kind': 'stage2',
            'seed': self.seed,
            'iteration': self.iteration,
            'config': self.cfg.to_dict(),
            'source_package': self.source_path,
            'source_checksums': self.source_checksums,
            'opt_e': self.opt_e.state_dict(),
            'opt_d': self.opt_d.state_dict(),
            'rng': self.rng.get_state(),
        }

    def checkpoint(self, path: str):
        """ Only the trained encoder and critic are written; the frozen networks stay in the source package. """
        if self.source_path is None:
            raise ValueError("Stage 2 checkpoints need the path of the source package.")
        save_checkpoint(path, self.model, self.training_state(), networks=TRAINED_NETWORKS)

    @classmethod
    def resume(cls, path: str) -> "Stage2Trainer":
        adapted, state = load_checkpoint(path)
        if state.get('kind') != 'stage2':
            raise ValueError(f"{path!r} is not a stylization checkpoint.")
        source = load_package(state['source_package'], adapted.architecture)
        for name, checksum in state['source_checksums'].items():
            if source.checksum(name) != checksum:
                raise ValueError(f"Source package {state['source_package']!r} no longer matches the checkpoint "
                                 f"({name} differs).")
        trainer = cls(source, StylizeConfig.from_dict(state['config']), int(state['seed']), state['source_package'])
        trainer.model.encoder.load_state_dict(adapted.encoder.state_dict())
        trainer.model.critic.load_state_dict(adapted.critic.state_dict())
        trainer.opt_e.load_state_dict(state['opt_e'])
        trainer.opt_d.load_state_dict(state['opt_d'])
        trainer.rng.set_state(state['rng'])
        trainer.iteration = int(state['iteration'])
        trainer.model.iteration = trainer.iteration
        return trainer


def _as_batch(image: torch.Tensor) -> torch.Tensor:
    if image.dim() == 3:
        return image.unsqueeze(0)
    if image.dim() == 4:
        return image
    raise ShapeMismatch(f"Expected a 3 x R x R image or a batch, got {tuple(image.shape)}.")


def stylize_offline(model: StyleModel, source_dataset, cfg: StylizeConfig, seed: int,
                    source_path: str | None = None, checkpoint_dir: str | None = None,
                    progress: bool = False) -> StyleModel:
    """ Adapt the encoder on shuffled source batches for cfg.steps updates.

        Args:
            model (StyleModel): Style model from stage 1; left untouched.
            source_dataset: ImageDataset of source images.
            cfg (StylizeConfig): Offline configuration.
            seed (int): Run seed.
            source_path (str): Package path of model, needed for checkpoints.
            checkpoint_dir (str): When given, checkpoints every steps/10 updates and at the end.
            progress (bool): Draw a progress bar on standard error.
        Returns:
            StyleModel: Adapted model; decoder and remapper bitwise equal to model's.
    """
    if len(source_dataset) == 0:
        raise EmptyDataset("The source dataset is empty.")
    trainer = Stage2Trainer(model, cfg, seed, source_path)
    return _run_offline(trainer, source_dataset, checkpoint_dir, progress)


def resume_offline(checkpoint: str, source_dataset, checkpoint_dir: str | None = None,
                   progress: bool = False) -> StyleModel:
    trainer = Stage2Trainer.resume(checkpoint)
    logging.info(f'Resuming stylization from {checkpoint} at step {trainer.iteration}.')
    return _run_offline(trainer, source_dataset, checkpoint_dir, progress)


def _progress_bar(total: int, initial: int, desc: str, enabled: bool) -> tqdm:
    return tqdm(total=total, initial=initial, desc=desc, unit='step', file=sys.stderr, disable=not enabled)


def _run_offline(trainer: Stage2Trainer, source_dataset, checkpoint_dir: str | None,
                 progress: bool = False) -> StyleModel:
    cfg = trainer.cfg
    xs = batches(source_dataset, cfg.batch_size, derive_seed(trainer.seed, 'x'), start=trainer.iteration)
    cadence = max(1, cfg.steps // 10)
    with _progress_bar(cfg.steps, trainer.iteration, 'offline', progress) as pbar:
        while trainer.iteration < cfg.steps:
            trainer.step(next(xs))
            pbar.update(1)
            if checkpoint_dir and (trainer.iteration % cadence == 0 or trainer.iteration == cfg.steps):
                trainer.checkpoint(os.path.join(checkpoint_dir, f'step_{trainer.iteration:07d}'))
    return trainer.finish()


def stylize_online(model: StyleModel, source_stream: Iterable[torch.Tensor], cfg: StylizeConfig, seed: int,
                   on_step: Callable[[StyleModel, LossReport], None] | None = None,
                   progress: bool = False) -> StyleModel:
    """ Adapt the encoder one image at a time, in arrival order.

        Stops when the stream ends or after cfg.steps updates, whichever comes first.  on_step receives the model
        after every update; it may run stylize_forward on it.

        Raises:
            EmptyDataset: The stream yields nothing.
    """
    trainer = Stage2Trainer(model, cfg, seed)
    with _progress_bar(cfg.steps, 0, 'online', progress) as pbar:
        for image in source_stream:
            if trainer.iteration >= cfg.steps:
                break
            report = trainer.step(_as_batch(image))
            pbar.update(1)
            if on_step is not None:
                on_step(trainer.model, report)
    if trainer.iteration == 0:
        raise EmptyDataset("The source stream yielded no images.")
    return trainer.finish()


def stylize_test_time(model: StyleModel, image: torch.Tensor, cfg: StylizeConfig | None = None,
                      seed: int = 0) -> tuple[StyleModel, torch.Tensor]:
    """ Fine-tune a fresh copy of the encoder on one input for exactly cfg.steps updates, then stylize it.

        Args:
            model (StyleModel): Style model; left untouched.
            image (torch.Tensor): 3 x R x R or 1 x 3 x R x R input in [-1, 1].
            cfg (StylizeConfig): Defaults to test_time mode with 50 steps.
            seed (int): Run seed.
        Returns:
            tuple: (adapted model, stylized image shaped like the input).
    """
    cfg = cfg or StylizeConfig(mode='test_time')
    trainer = Stage2Trainer(model, cfg, seed)
    return _adapt_one(trainer, image)


def _adapt_one(trainer: Stage2Trainer, image: torch.Tensor,
               progress: bool = False) -> tuple[StyleModel, torch.Tensor]:
    x = _as_batch(image)
    with _progress_bar(trainer.cfg.steps, 0, 'test-time', progress) as pbar:
        for _ in range(trainer.cfg.steps):
            trainer.step(x)
            pbar.update(1)
    adapted = trainer.finish()
    out = stylize_forward(adapted, x)
    return adapted, out.reshape(image.shape)


def stylize_test_time_many(model: StyleModel, images: Iterable[torch.Tensor], cfg: StylizeConfig | None = None,
                           seed: int = 0, progress: bool = False) -> list[tuple[StyleModel, torch.Tensor]]:
    """ Test-time adaptation over several inputs.

        By default every input starts from the package weights.  With cfg.cumulative the same session carries on
        from one input to the next, so later inputs see an encoder already adapted to the earlier ones.
    """
    cfg = cfg or StylizeConfig(mode='test_time')
    results = []
    trainer = None
    for image in images:
        if trainer is None or not cfg.cumulative:
            trainer = Stage2Trainer(model, cfg, seed)
        adapted, out = _adapt_one(trainer, image, progress)
        if cfg.cumulative:
            adapted = copy.deepcopy(adapted)
        results.append((adapted, out))
    if not results:
        raise EmptyDataset("No input images given.")
    return results


def stylize_forward(model: StyleModel, x: torch.Tensor) -> torch.Tensor:
    """ x' = decode(E'(x)). """
    with torch.no_grad():
        return model.decoder(model.encoder(x))


def sample_with_styles(model: StyleModel, x: torch.Tensor, styles: torch.Tensor) -> torch.Tensor:
    """ Decode the content rows of E'(x) fused with explicitly supplied style rows (N x xi x D). """
    with torch.no_grad():
        content, _ = split(model.encoder(x), model.latent)
        return model.decoder(fuse(content, styles.to(content.dtype), model.latent))


def noise_for_seed(model: StyleModel, seed: int, n: int = 1) -> torch.Tensor:
    """ The noise vector of one seed, repeated n times. """
    g = torch.Generator().manual_seed(seed)
    return torch.randn(1, model.architecture.remapper.noise_dim, generator=g).expand(n, -1)


def sample_multimodal(model: StyleModel, x: torch.Tensor, noise_seeds: Iterable[int]) -> list[torch.Tensor]:
    """ One output batch per noise seed; all share the content rows of E'(x).

        Args:
            model (StyleModel): Raw or adapted style model.
            x (torch.Tensor): N x 3 x R x R inputs.
            noise_seeds (Iterable[int]): Each seed gives one noise vector, used for every image of the batch.
        Returns:
            list: N x 3 x R x R images, one entry per seed.
    """
    outputs = []
    for s in noise_seeds:
        with torch.no_grad():
            p = next(model.remapper.parameters())
            styles = model.remapper(noise_for_seed(model, s, x.shape[0]).to(p.dtype))
        outputs.append(sample_with_styles(model, x, styles))
    return outputs


class ModeError(ValueError):
    """ Indicates an unknown stylization mode or a mode used with the wrong entry point. """
    pass
