"""Multi-view latent diffusion with pixel-aligned 3D Gaussians."""

from .autoencoder import (
    ConvAutoencoder,
    IdentityAutoencoder,
    latent_statistics,
    make_autoencoder,
    psnr,
    train_autoencoder,
)
from .dataset import SceneData, load_dataset, load_png, load_scene, save_png, write_classes, write_scene
from .inference import (
    decode_gaussians,
    denoise_multiview,
    generate_scene,
    rendering_based_step,
    step_modes,
)
from .model import GMLDM, GMLDMConfig, gaussian_features, gaussians_from_features
from .train import single_view_step, sparse_indices, train_gmldm, training_step
