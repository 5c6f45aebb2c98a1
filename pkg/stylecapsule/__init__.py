from .latent import LatentConfig, LatentCode, split, fuse
from .losses import LossWeights, STAGE1_PHASE1, STAGE1_PHASE2, STAGE2_WEIGHTS
from .style_model import Architecture, StyleModel
from .data import SyntheticFaceDataset, synth_generate, load_folder, batches
from .stage1 import Stage1Schedule, weights_at, encapsulate
from .stage2 import StylizeConfig, stylize_offline, stylize_online, stylize_test_time, stylize_forward, \
    sample_multimodal
from .persist import save_package, load_package
