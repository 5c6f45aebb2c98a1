""" Loss terms and the two stage objectives.

    Every ||.||_2 distance is the per-element mean of squares, so identical inputs give exactly zero.  The identity
    loss is computed as half the squared distance between unit vectors, which equals one minus their cosine but is
    exactly zero for identical embeddings.

    Objectives take the loss terms as zero-argument callables and only evaluate terms whose weight is non-zero.
"""
import math
from dataclasses import dataclass, asdict, field, fields
from typing import Callable

import torch
from torch.nn import functional as F

from stylecapsule.latent import LatentConfig, ShapeMismatch, split

STAGE1_TERMS = ('adv_r', 'adv_z', 'recon', 'lpips', 'id', 'swap')
STAGE2_TERMS = ('adv_x', 'recon', 'lpips', 'id')
DEFAULT_GP_WEIGHT = 10.0


@dataclass(frozen=True)
class LossWeights:
    """ Weight per loss term; terms not used by a stage stay at zero. """
    adv_r: float = 0.0
    adv_z: float = 0.0
    recon: float = 0.0
    lpips: float = 0.0
    id: float = 0.0
    swap: float = 0.0
    adv_x: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"Loss weight {f.name} must be finite and non-negative, got {v}.")

    def active(self, names=None) -> dict[str, float]:
        names = names or [f.name for f in fields(self)]
        return {n: getattr(self, n) for n in names if getattr(self, n) != 0}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(**{k: float(v) for k, v in d.items()})


# Stage 1 reconstruction phase, then the swap phase; stage 2 adaptation.
STAGE1_PHASE1 = LossWeights(swap=0.0, lpips=0.8, adv_r=0.1, adv_z=0.0, recon=0.8, id=1.0)
STAGE1_PHASE2 = LossWeights(swap=1.0, lpips=0.0, adv_r=0.0, adv_z=0.1, recon=0.0, id=0.0)
STAGE2_WEIGHTS = LossWeights(recon=0.5, lpips=0.8, id=1.0, adv_x=0.01)


@dataclass
class LossReport:
    """ Values of the terms evaluated in one training step; zero-weight terms are absent. """
    stage: int
    iteration: int
    terms: dict[str, float]
    critic: dict[str, float] = field(default_factory=dict)
    phase: int | None = None

    def as_line(self) -> str:
        """ One key=value line for the metrics log. """
        parts = [f'stage={self.stage}', f'iteration={self.iteration}']
        if self.phase is not None:
            parts.append(f'phase={self.phase}')
        parts += [f'loss_{k}={v:.6g}' for k, v in self.terms.items()]
        parts += [f'critic_{k}={v:.6g}' for k, v in self.critic.items()]
        return ' '.join(parts)


def _same_shape(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ShapeMismatch(f"Shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}.")


def loss_recon(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """ Pixel-level reconstruction loss. """
    _same_shape(a, b)
    return F.mse_loss(a, b)


def _unit_channels(x: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    return x * torch.rsqrt(x.pow(2).sum(dim=1, keepdim=True) + eps)


def loss_lpips(perceptual, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """ Learned-perceptual distance: channel-normalized activations compared at every scale, summed over scales.

        Args:
            perceptual: Callable returning a list of activation maps, e.g. nets.PerceptualEmbedder.
            a, b (torch.Tensor): Image batches of the same shape.
        Returns:
            torch.Tensor: Scalar, zero iff the activations agree at every scale.
    """
    _same_shape(a, b)
    total = a.new_zeros(())
    for fa, fb in zip(perceptual(a), perceptual(b)):
        total = total + F.mse_loss(_unit_channels(fa), _unit_channels(fb))
    return total


def loss_id(identity, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """ One minus the cosine similarity of identity embeddings, averaged over the batch; in [0, 2].

        Raises:
            UndefinedCosine: An embedding has zero norm.
    """
    _same_shape(a, b)
    ea, eb = identity(a), identity(b)
    na, nb = ea.norm(dim=1, keepdim=True), eb.norm(dim=1, keepdim=True)
    if (na == 0).any() or (nb == 0).any():
        raise UndefinedCosine("Identity embedding has zero norm; cosine is undefined.")
    return 0.5 * (ea / na - eb / nb).pow(2).sum(dim=1).mean()


def gradient_penalty(critic, real: torch.Tensor, fake: torch.Tensor,
                     generator: torch.Generator | None = None) -> torch.Tensor:
    """ Mean of (||grad Dis(x_hat)|| - 1)^2 at random interpolates x_hat between real and fake images. """
    eps = torch.rand(real.shape[0], 1, 1, 1, generator=generator, dtype=real.dtype)
    x_hat = (eps * real.detach() + (1 - eps) * fake.detach()).requires_grad_(True)
    scores = critic(x_hat)
    grads, = torch.autograd.grad(scores.sum(), x_hat, create_graph=True)
    return (grads.flatten(1).norm(2, dim=1) - 1).pow(2).mean()


def wasserstein_gap(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    """ E[Dis(real)] - E[Dis(fake)]. """
    return real_scores.mean() - fake_scores.mean()


def loss_adv_critic(critic, real: torch.Tensor, fake: torch.Tensor, gp_weight: float = DEFAULT_GP_WEIGHT,
                    generator: torch.Generator | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """ Critic side of the WGAN objective.

        Args:
            critic: The critic network.
            real (torch.Tensor): Images the critic should score high.
            fake (torch.Tensor): Images the critic should score low; detached here.
            gp_weight (float): Gradient penalty coefficient; 0 gives the plain Wasserstein form.
            generator (torch.Generator): Source of the interpolation coefficients.
        Returns:
            tuple: (loss to minimize, Wasserstein gap E[Dis(real)] - E[Dis(fake)]).
    """
    _same_shape(real, fake)
    gap = wasserstein_gap(critic(real), critic(fake.detach()))
    loss = -gap
    if gp_weight:
        loss = loss + gp_weight * gradient_penalty(critic, real, fake, generator)
    return loss, gap


def loss_adv_gen(critic, fake: torch.Tensor) -> torch.Tensor:
    """ Generator side of the WGAN objective: -E[Dis(fake)]. """
    return -critic(fake).mean()


def loss_swap(encoder, latent: LatentConfig, y_z: torch.Tensor, w_z: torch.Tensor) -> torch.Tensor:
    """ Re-encode a noise-styled image and compare the recovered style rows with the injected ones.

        Args:
            encoder: Encoder used for re-encoding; gradients reach it as well as whatever produced y_z and w_z.
            latent (LatentConfig): Configuration holding the fusion index.
            y_z (torch.Tensor): Images decoded from fused codes.
            w_z (torch.Tensor): N x xi x D style rows that were fused in.
        Returns:
            torch.Tensor: Mean squared distance between w_z and the re-encoded style rows.
    """
    _, recovered = split(encoder(y_z), latent)
    if recovered.shape != w_z.shape:
        raise ShapeMismatch(f"Injected style rows {tuple(w_z.shape)} do not match recovered {tuple(recovered.shape)}.")
    return F.mse_loss(recovered, w_z)


def _objective(weights: LossWeights, terms: dict[str, Callable[[], torch.Tensor]],
               names: tuple[str, ...]) -> tuple[torch.Tensor, dict[str, float]]:
    total = None
    report = {}
    for name in names:
        w = getattr(weights, name)
        if w == 0:
            continue
        value = terms[name]()
        if not torch.isfinite(value).all():
            raise NonFiniteLoss(name, float(value.detach()))
        report[name] = float(value.detach())
        total = w * value if total is None else total + w * value
    if total is None:
        total = torch.zeros(())
    return total, report


def objective_stage1(weights: LossWeights, terms: dict[str, Callable[[], torch.Tensor]]):
    """ Weighted sum of the stage 1 terms; zero-weight terms are never called.

        Args:
            weights (LossWeights): Current schedule weights.
            terms (dict): Term name (see STAGE1_TERMS) to a callable returning the term's value.
        Returns:
            tuple: (total loss, {term name: value} for every evaluated term).
        Raises:
            NonFiniteLoss: An evaluated term is NaN or infinite.
    """
    return _objective(weights, terms, STAGE1_TERMS)


def objective_stage2(weights: LossWeights, terms: dict[str, Callable[[], torch.Tensor]]):
    """ Weighted sum of the stage 2 terms (adv_x, recon, lpips, id); zero-weight terms are never called. """
    return _objective(weights, terms, STAGE2_TERMS)


class UndefinedCosine(ValueError):
    """ Indicates a zero-norm embedding where a cosine is required. """
    pass


class NonFiniteLoss(RuntimeError):
    """ Indicates that a loss term evaluated to NaN or infinity. """
    def __init__(self, term: str, value: float):
        super().__init__(f"Loss term {term!r} is not finite ({value}).")
        self.term = term
