"""Universal image immunization lab.

A toy latent diffusion editor, universal adversarial perturbations that
disrupt its cross-attention, and the metrics and purifiers used to judge them.
"""

from .data import JigsawPrior, ShapeDatasetManifest, gen_shapes_dataset, load_image, render_shapes, save_image
from .diffusion import BundleConfig, Img2ImgEditor, ToyLdmBundle, edit_img2img, pretrain_toy
from .immunizer import LossKind, Uap, UapTrainConfig, UniversalImmunizer, default_target, immunize, train_uap, train_uap_datafree
from .metrics import EditParams, ImmunizationEvaluator, MetricReport, psnr, ssim, uniform_noise_control
from .purify import DiffPureLite, JpegLite, MeanSmooth, jpeg_lite, mean_smooth

__version__ = "0.1.0"

__all__ = [
    "BundleConfig",
    "DiffPureLite",
    "EditParams",
    "Img2ImgEditor",
    "ImmunizationEvaluator",
    "JigsawPrior",
    "JpegLite",
    "LossKind",
    "MeanSmooth",
    "MetricReport",
    "ShapeDatasetManifest",
    "ToyLdmBundle",
    "Uap",
    "UapTrainConfig",
    "UniversalImmunizer",
    "default_target",
    "edit_img2img",
    "gen_shapes_dataset",
    "immunize",
    "jpeg_lite",
    "load_image",
    "mean_smooth",
    "pretrain_toy",
    "psnr",
    "render_shapes",
    "save_image",
    "ssim",
    "train_uap",
    "train_uap_datafree",
    "uniform_noise_control",
]
