import copy
import hashlib
from dataclasses import dataclass, field
from typing import Iterable

import torch

from stylecapsule.latent import LatentConfig
from stylecapsule.nets import (CriticSpec, DecoderSpec, EmbedderSpec, EncoderSpec, RemapperSpec, Critic, Decoder,
                               Encoder, IdentityEmbedder, PerceptualEmbedder, Remapper, tensor_bytes)

NETWORKS = ('encoder', 'decoder', 'remapper', 'critic')
PERCEPTUAL_SEED = 1234
IDENTITY_SEED = 4321


def derive_seed(seed: int, name: str) -> int:
    """ Stable per-network seed derived from the run seed. """
    return int.from_bytes(hashlib.sha256(f'{seed}:{name}'.encode()).digest()[:4], 'big')


@dataclass(frozen=True)
class Architecture:
    """ Every network spec of a style model plus the surrogate embedder specs. """
    resolution: int
    latent: LatentConfig
    encoder: EncoderSpec
    decoder: DecoderSpec
    remapper: RemapperSpec
    critic: CriticSpec
    perceptual: EmbedderSpec
    identity: EmbedderSpec

    @classmethod
    def for_resolution(cls, resolution: int = 64, layer_dim: int = 512, fusion_index: int | None = None,
                       noise_dim: int = 512, hidden: tuple[int, ...] = (512, 512, 512),
                       encoder_channels: tuple[int, int, int] = (32, 64, 128), pyramid_channels: int = 64,
                       decoder_channels: tuple[int, ...] | None = None,
                       critic_channels: tuple[int, ...] | None = None) -> "Architecture":
        latent = LatentConfig.for_resolution(resolution, layer_dim, fusion_index)
        return cls(
            resolution=resolution,
            latent=latent,
            encoder=EncoderSpec(resolution, latent, encoder_channels, pyramid_channels),
            decoder=DecoderSpec(resolution, latent, decoder_channels),
            remapper=RemapperSpec(latent, noise_dim, hidden),
            critic=CriticSpec(resolution, critic_channels),
            perceptual=EmbedderSpec('perceptual', resolution, seed=PERCEPTUAL_SEED),
            identity=EmbedderSpec('identity', resolution, seed=IDENTITY_SEED),
        )

    def with_fusion_index(self, fusion_index: int) -> "Architecture":
        return Architecture.for_resolution(
            self.resolution, self.latent.layer_dim, fusion_index, self.remapper.noise_dim, self.remapper.hidden,
            self.encoder.channels, self.encoder.pyramid_channels, self.decoder.channels, self.critic.channels)

    def to_dict(self) -> dict:
        return {
            'resolution': self.resolution,
            'latent': self.latent.to_dict(),
            'encoder': {'channels': list(self.encoder.channels), 'pyramid_channels': self.encoder.pyramid_channels},
            'decoder': {'channels': list(self.decoder.channels)},
            'remapper': {'noise_dim': self.remapper.noise_dim, 'hidden': list(self.remapper.hidden)},
            'critic': {'channels': list(self.critic.channels)},
            'perceptual': {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.perceptual.to_dict().items()},
            'identity': {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.identity.to_dict().items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        resolution = int(d['resolution'])
        latent = LatentConfig.from_dict(d['latent'])
        return cls(
            resolution=resolution,
            latent=latent,
            encoder=EncoderSpec(resolution, latent, tuple(d['encoder']['channels']),
                                int(d['encoder']['pyramid_channels'])),
            decoder=DecoderSpec(resolution, latent, tuple(d['decoder']['channels'])),
            remapper=RemapperSpec(latent, int(d['remapper']['noise_dim']), tuple(d['remapper']['hidden'])),
            critic=CriticSpec(resolution, tuple(d['critic']['channels'])),
            perceptual=EmbedderSpec(**{**d['perceptual'], 'channels': tuple(d['perceptual']['channels'])}),
            identity=EmbedderSpec(**{**d['identity'], 'channels': tuple(d['identity']['channels'])}),
        )


@dataclass
class StyleModel:
    """ The portable style model: encoder, decoder and remapper, optionally the critic, and their provenance.

        history carries everything the manifest records besides weights: schedule summary, stage 2 decisions and
        the effective configuration of the run that produced the model.
    """
    architecture: Architecture
    encoder: Encoder
    decoder: Decoder
    remapper: Remapper
    critic: Critic | None = None
    seed: int = 0
    iteration: int = 0
    history: dict = field(default_factory=dict)

    @classmethod
    def build(cls, architecture: Architecture, seed: int, with_critic: bool = True) -> "StyleModel":
        return cls(
            architecture=architecture,
            encoder=Encoder(architecture.encoder, derive_seed(seed, 'encoder')),
            decoder=Decoder(architecture.decoder, derive_seed(seed, 'decoder')),
            remapper=Remapper(architecture.remapper, derive_seed(seed, 'remapper')),
            critic=Critic(architecture.critic, derive_seed(seed, 'critic')) if with_critic else None,
            seed=seed,
        )

    @property
    def latent(self) -> LatentConfig:
        return self.architecture.latent

    def networks(self) -> dict[str, torch.nn.Module]:
        nets = {'encoder': self.encoder, 'decoder': self.decoder, 'remapper': self.remapper}
        if self.critic is not None:
            nets['critic'] = self.critic
        return nets

    def state_dict(self) -> dict[str, torch.Tensor]:
        """ All weights, keyed '<network>.<parameter>', in a fixed order. """
        state = {}
        for net_name, net in self.networks().items():
            for name, t in net.state_dict().items():
                state[f'{net_name}.{name}'] = t
        return state

    def load_state_dict(self, state: dict[str, torch.Tensor], networks: Iterable[str] | None = None):
        """ Load every network, or only the named ones; the others keep their weights. """
        selected = set(self.networks() if networks is None else networks)
        for net_name, net in self.networks().items():
            if net_name not in selected:
                continue
            prefix = f'{net_name}.'
            net.load_state_dict({k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}, strict=True)

    def clone(self) -> "StyleModel":
        return copy.deepcopy(self)

    def embedders(self) -> tuple[PerceptualEmbedder, IdentityEmbedder]:
        """ The fixed surrogate perceptual and identity networks this model's losses and metrics use. """
        return PerceptualEmbedder(self.architecture.perceptual), IdentityEmbedder(self.architecture.identity)

    def checksum(self, network: str) -> str:
        h = hashlib.sha256()
        for name, t in self.networks()[network].state_dict().items():
            h.update(name.encode())
            h.update(tensor_bytes(t))
        return h.hexdigest()

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in self.networks():
            h.update(self.checksum(name).encode())
        return h.hexdigest()[:12]
