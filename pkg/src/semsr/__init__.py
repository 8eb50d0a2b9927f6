"""GAN super-resolution for SEM-style images: simulation, registration, training and resolution metrics."""

from .imaging import ImageGrid, bin_downsample, crop_center, lanczos_upsample, load_image, save_image

__version__ = "0.1.0"

__all__ = [
    "ImageGrid",
    "bin_downsample",
    "crop_center",
    "lanczos_upsample",
    "load_image",
    "save_image",
    "__version__",
]
