""" Evaluation: Fréchet distance between feature Gaussians, multimodal diversity, and the two ablations.

    Features come from the surrogate perceptual network (nets.feature_vector), so distances are only comparable
    between runs that report the same embedder fingerprint.
"""
import logging
import os
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg
import torch

from stylecapsule.data import save_grid
from stylecapsule.latent import fuse, split
from stylecapsule.losses import loss_id
from stylecapsule.nets import PerceptualEmbedder, feature_vector, fingerprint
from stylecapsule.stage1 import Stage1Schedule, encapsulate
from stylecapsule.stage2 import StylizeConfig, noise_for_seed, sample_multimodal, stylize_forward, stylize_offline
from stylecapsule.style_model import Architecture, StyleModel

PSD_TOLERANCE = 1e-6
DIAGONAL_LOADING = 1e-6


@dataclass
class GaussianStats:
    """ Mean and covariance of a feature set. """
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if self.count < 2:
            raise TooFewSamples(f"Gaussian statistics need at least 2 samples, got {self.count}.")
        if self.cov.shape != (self.mean.shape[0], self.mean.shape[0]):
            raise ValueError(f"Covariance {self.cov.shape} does not match mean of length {self.mean.shape[0]}.")
        if not np.allclose(self.cov, self.cov.T, rtol=0, atol=1e-8):
            raise ValueError("Covariance is not symmetric.")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def gaussian_stats(features) -> GaussianStats:
    """ Fit a Gaussian to N x E features (numpy array or tensor), in float64. """
    if isinstance(features, torch.Tensor):
        features = features.detach().cpu().double().numpy()
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[:, None]
    if features.shape[0] < 2:
        raise TooFewSamples(f"Gaussian statistics need at least 2 samples, got {features.shape[0]}.")
    return GaussianStats(features.mean(axis=0), np.cov(features, rowvar=False), features.shape[0])


def psd_sqrt(m: np.ndarray) -> np.ndarray:
    """ Square root of a symmetric positive semi-definite matrix.

        Diagonal input takes elementwise square roots; anything else goes through an eigendecomposition with
        eigenvalues in [-tolerance, 0) clamped to zero.

        Raises:
            NotPositiveSemidefinite: An eigenvalue is below -1e-6 (relative to the largest magnitude, at least 1).
    """
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    m = (m + m.T) / 2
    if np.count_nonzero(m - np.diag(np.diag(m))) == 0:
        values = np.diag(m)
        _check_eigenvalues(values)
        return np.diag(np.sqrt(np.clip(values, 0, None)))
    values, vectors = scipy.linalg.eigh(m)
    _check_eigenvalues(values)
    return (vectors * np.sqrt(np.clip(values, 0, None))) @ vectors.T


def _check_eigenvalues(values: np.ndarray):
    scale = max(1.0, float(np.abs(values).max()))
    if values.min() < -PSD_TOLERANCE * scale:
        raise NotPositiveSemidefinite(f"Matrix has eigenvalue {values.min():.3g}; expected positive semi-definite.")


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """ ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2)), clamped at zero.

        The cross term uses the symmetric form tr((S_a^(1/2) S_b S_a^(1/2))^(1/2)), which has the same trace.

        Raises:
            ValueError: The two statistics have different dimensions.
            NotPositiveSemidefinite: A covariance is not PSD within tolerance.
    """
    if a.dim != b.dim:
        raise ValueError(f"Feature dimensions differ: {a.dim} vs {b.dim}.")
    root_a = psd_sqrt(a.cov)
    cross = psd_sqrt(root_a @ b.cov @ root_a)
    diff = a.mean - b.mean
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2 * np.trace(cross))
    return max(0.0, value)


@dataclass
class FidReport:
    value: float
    counts: tuple[int, int]
    diagonal_loading: bool
    embedder_fingerprint: str

    def as_dict(self, prefix: str = 'fid') -> dict:
        return {
            prefix: self.value,
            f'{prefix}_count_a': self.counts[0],
            f'{prefix}_count_b': self.counts[1],
            f'{prefix}_diagonal_loading': int(self.diagonal_loading),
            'embedder_fingerprint': self.embedder_fingerprint,
        }


def extract_features(embedder: PerceptualEmbedder, images: torch.Tensor, batch_size: int = 16) -> torch.Tensor:
    with torch.no_grad():
        return torch.cat([feature_vector(embedder, images[i:i + batch_size])
                          for i in range(0, images.shape[0], batch_size)])


def _loaded(stats: GaussianStats) -> GaussianStats:
    return GaussianStats(stats.mean, stats.cov + DIAGONAL_LOADING * np.eye(stats.dim), stats.count)


def frechet_between_sets(images_a: torch.Tensor, images_b: torch.Tensor, embedder: PerceptualEmbedder) -> FidReport:
    """ Fréchet distance between the feature Gaussians of two image sets.

        When either set has no more images than feature dimensions, both covariances get 1e-6 added to their
        diagonal and the report says so.
    """
    stats_a = gaussian_stats(extract_features(embedder, images_a))
    stats_b = gaussian_stats(extract_features(embedder, images_b))
    loading = min(stats_a.count, stats_b.count) <= stats_a.dim
    if loading:
        logging.warning(f'Only {min(stats_a.count, stats_b.count)} samples for {stats_a.dim} feature dimensions; '
                        f'applying diagonal loading of {DIAGONAL_LOADING}.')
        stats_a, stats_b = _loaded(stats_a), _loaded(stats_b)
    return FidReport(frechet_distance(stats_a, stats_b), (stats_a.count, stats_b.count), loading,
                     fingerprint(embedder))


def stylize_all(model: StyleModel, images: torch.Tensor, batch_size: int = 16) -> torch.Tensor:
    return torch.cat([stylize_forward(model, images[i:i + batch_size])
                      for i in range(0, images.shape[0], batch_size)])


def eval_fid(model: StyleModel, source_set, reference_set, embedder: PerceptualEmbedder | None = None) -> FidReport:
    """ Fréchet distance between stylized source images and the reference set.

        Args:
            model (StyleModel): Adapted or raw style model.
            source_set: ImageDataset of inputs, at least 2 images.
            reference_set: ImageDataset of reference (style) images, at least 2 images.
            embedder (PerceptualEmbedder): Defaults to the model's own surrogate.
        Returns:
            FidReport: Distance, sample counts, whether diagonal loading was applied, embedder fingerprint.
    """
    embedder = embedder or model.embedders()[0]
    return frechet_between_sets(stylize_all(model, source_set.images), reference_set.images, embedder)


def pairwise_diversity(features: Sequence[torch.Tensor]) -> float:
    """ Mean Euclidean distance over all pairs of per-variant N x E feature batches, averaged over images. """
    if len(features) < 2:
        raise TooFewSamples(f"Diversity needs at least 2 variants, got {len(features)}.")
    total, pairs = 0.0, 0
    for i in range(len(features)):
        for j in range(i + 1, len(features)):
            total += float(torch.linalg.vector_norm(features[i] - features[j], dim=1).mean())
            pairs += 1
    return total / pairs


def diversity_score(model: StyleModel, x: torch.Tensor, noise_seeds: Sequence[int],
                    embedder: PerceptualEmbedder | None = None) -> float:
    """ Mean pairwise perceptual-feature distance between the outputs of sample_multimodal.

        Raises:
            TooFewSamples: Fewer than two seeds.
    """
    if len(noise_seeds) < 2:
        raise TooFewSamples(f"Diversity needs at least 2 noise seeds, got {len(noise_seeds)}.")
    embedder = embedder or model.embedders()[0]
    return pairwise_diversity([extract_features(embedder, out) for out in sample_multimodal(model, x, noise_seeds)])


def consistency_error(model: StyleModel, images: torch.Tensor, noise_seeds: Iterable[int]) -> float:
    """ Style-code consistency error: mean squared distance between injected style rows w_z and the rows the
        encoder recovers from the decoded image, averaged over seeds.
    """
    errors = []
    with torch.no_grad():
        content, _ = split(model.encoder(images), model.latent)
        for s in noise_seeds:
            w_z = model.remapper(noise_for_seed(model, s, images.shape[0]).to(content.dtype))
            y_z = model.decoder(fuse(content, w_z, model.latent))
            _, recovered = split(model.encoder(y_z), model.latent)
            errors.append(float((recovered - w_z).pow(2).mean()))
    if not errors:
        raise TooFewSamples("Consistency error needs at least one noise seed.")
    return sum(errors) / len(errors)


def ablate_swap(style_set, source_set, schedule: Stage1Schedule, seeds: Sequence[int] = (0, 1, 2),
                architecture: Architecture | None = None, noise_seeds: Sequence[int] = (0, 1, 2, 3),
                out_dir: str | None = None) -> dict:
    """ Paired style encapsulation runs with and without the swapping loss.

        The swap-off run uses the same schedule with the phase 2 swap weight set to zero.  Each run reports its
        end-of-training consistency error on the style images.

        Returns:
            dict: swap_on.<seed>, swap_off.<seed>, and swap_on_wins, the number of seeds where swap-on is lower.
    """
    swap_on = schedule.phase2_weights.swap or 1.0
    variants = {
        'swap_on': replace(schedule, phase2_weights=replace(schedule.phase2_weights, swap=swap_on)),
        'swap_off': replace(schedule, phase2_weights=replace(schedule.phase2_weights, swap=0.0)),
    }
    report, wins, grid_models = {}, 0, {}
    style_images = style_set.images[:max(schedule.batch_size, 1)]
    for seed in seeds:
        errors = {}
        for name, variant in variants.items():
            model = encapsulate(style_set, variant, seed, architecture)
            errors[name] = consistency_error(model, style_images, noise_seeds)
            report[f'{name}.{seed}'] = errors[name]
            logging.info(f'Swap ablation {seed=} {name}: consistency error {errors[name]:.6g}.')
            if seed == seeds[0]:
                grid_models[name] = model
        wins += errors['swap_on'] < errors['swap_off']
    report['swap_on_wins'] = wins
    report['seeds'] = len(seeds)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        x = source_set.images[:4]
        columns = [sample_multimodal(grid_models[name], x, noise_seeds[:2]) for name in variants]
        rows = [[x[i]] + [out[i] for outs in columns for out in outs] for i in range(x.shape[0])]
        save_grid(rows, os.path.join(out_dir, 'ablate_swap.png'))
    return report


def ablate_xi(style_set, source_set, xi_list: Sequence[int], schedule: Stage1Schedule,
              stylize_cfg: StylizeConfig, seeds: Sequence[int] = (0, 1, 2),
              architecture: Architecture | None = None, noise_seeds: Sequence[int] = (0, 1, 2, 3),
              out_dir: str | None = None) -> dict:
    """ One encapsulate + offline stylize run per fusion index.

        Two identity losses between x and the output are reported per run: `forward` for x' = decode(E'(x)) and
        `sampled` for outputs whose style rows come from the remapper.  xi_trend_wins counts the seeds where
        `forward` at the largest fusion index is above `forward` at the smallest one: a larger index leaves fewer
        content rows to carry identity through the stylized output.

        Returns:
            dict: id_forward.<xi>.<seed>, id_sampled.<xi>.<seed>, and xi_trend_wins over seeds.
    """
    if len(xi_list) < 1:
        raise ValueError("The fusion index list is empty.")
    architecture = architecture or Architecture.for_resolution(style_set.resolution)
    lo, hi = min(xi_list), max(xi_list)
    x = source_set.images[:max(stylize_cfg.batch_size, 2)]
    report, wins, grid_columns = {}, 0, []
    for seed in seeds:
        forward = {}
        for xi in xi_list:
            arch = architecture.with_fusion_index(xi)
            model = encapsulate(style_set, schedule, seed, arch)
            adapted = stylize_offline(model, source_set, stylize_cfg, seed)
            identity = adapted.embedders()[1]
            with torch.no_grad():
                forward[xi] = float(loss_id(identity, stylize_forward(adapted, x), x))
                outs = sample_multimodal(adapted, x, noise_seeds)
                sampled = sum(float(loss_id(identity, out, x)) for out in outs) / len(outs)
            report[f'id_forward.{xi}.{seed}'] = forward[xi]
            report[f'id_sampled.{xi}.{seed}'] = sampled
            logging.info(f'Fusion index ablation {seed=} {xi=}: identity loss {forward[xi]:.6g} forward, '
                         f'{sampled:.6g} sampled.')
            if seed == seeds[0]:
                grid_columns.append(outs[0])
        wins += forward[hi] > forward[lo]
    report['xi_trend_wins'] = wins
    report['seeds'] = len(seeds)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        rows = [[x[i]] + [col[i] for col in grid_columns] for i in range(x.shape[0])]
        save_grid(rows, os.path.join(out_dir, 'ablate_xi.png'))
    return report


def write_report(path: str, metrics: dict):
    """ One key=value line per metric, in insertion order; nested dicts are flattened with dots. """
    def flatten(d, prefix=''):
        for k, v in d.items():
            if isinstance(v, dict):
                yield from flatten(v, f'{prefix}{k}.')
            else:
                yield f'{prefix}{k}', v

    with open(path, 'w') as hndl:
        for k, v in flatten(metrics):
            hndl.write(f'{k}={v:.10g}\n' if isinstance(v, float) else f'{k}={v}\n')


class NotPositiveSemidefinite(ValueError):
    """ Indicates a covariance with a clearly negative eigenvalue. """
    pass


class TooFewSamples(ValueError):
    """ Indicates fewer samples than a statistic needs. """
    pass
