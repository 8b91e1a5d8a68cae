"""binsight: PE files as images, a small CNN zoo, a Gini forest and GradCAM++ attention maps."""

__version__ = "0.1.0"

from .binary import PeLayout, RawBinary, SectionInfo, load_binary, parse_pe
from .imaging import GrayImage, RgbImage, resample, to_grayscale, to_hit_rgb
from .models import ModelBundle, load_bundle, save_bundle
from .nn import CnnConfig, CnnModel, TrainConfig, fit, init_model, predict
from .stats import byte_histogram, detect_padding, shannon_entropy, sliding_entropy, uniformity_score

__all__ = [
    "CnnConfig", "CnnModel", "GrayImage", "ModelBundle", "PeLayout", "RawBinary", "RgbImage",
    "SectionInfo", "TrainConfig", "byte_histogram", "detect_padding", "fit", "init_model",
    "load_binary", "load_bundle", "parse_pe", "predict", "resample", "save_bundle",
    "shannon_entropy", "sliding_entropy", "to_grayscale", "to_hit_rgb", "uniformity_score",
]
