""" Shared fixtures: a tiny architecture, synthetic datasets and a finite-difference gradient check. """
import torch

from stylecapsule.data import SyntheticFaceDataset, synth_generate
from stylecapsule.style_model import Architecture, StyleModel


def tiny_architecture(resolution: int = 8, fusion_index: int | None = None) -> Architecture:
    """ Resolution 8 gives L = 4 latent rows; D = 8. """
    return Architecture.for_resolution(resolution, layer_dim=8, fusion_index=fusion_index, noise_dim=8, hidden=(16,),
                                       encoder_channels=(4, 8, 8), pyramid_channels=8)


def tiny_model(seed: int = 0, fusion_index: int | None = None, with_critic: bool = True) -> StyleModel:
    return StyleModel.build(tiny_architecture(fusion_index=fusion_index), seed, with_critic=with_critic)


def tiny_faces(count: int = 8, seed: int = 0, profile: str = 'photo', resolution: int = 8):
    return synth_generate(SyntheticFaceDataset(seed, count, resolution, profile))


def gradient_agreement(fn, tensor: torch.Tensor, coords: int = 200, eps: float = 1e-6, rtol: float = 1e-3,
                       atol: float = 1e-8, seed: int = 0) -> float:
    """ Fraction of sampled coordinates where autograd agrees with a central difference.

        fn is called with no arguments and must return a float64 scalar depending on tensor, a leaf that requires
        grad.  Coordinates are drawn without replacement.
    """
    grad, = torch.autograd.grad(fn(), tensor)
    grad = grad.reshape(-1)
    flat = tensor.data.view(-1)
    g = torch.Generator().manual_seed(seed)
    picks = torch.randperm(flat.numel(), generator=g)[:coords]
    agree = 0
    for i in picks.tolist():
        orig = flat[i].item()
        flat[i] = orig + eps
        up = fn().item()
        flat[i] = orig - eps
        down = fn().item()
        flat[i] = orig
        numeric = (up - down) / (2 * eps)
        analytic = grad[i].item()
        if abs(analytic - numeric) <= max(atol, rtol * max(abs(analytic), abs(numeric))):
            agree += 1
    return agree / len(picks)
