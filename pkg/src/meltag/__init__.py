"""meltag: a self-contained music audio tagging engine.

Log-mel DSP front end, a hand-written convolutional network core with two
architecture families, a taggram-based tagger CLI, an intermediate-feature
extractor, and a PCA+SVM transfer-learning pipeline.
"""

from .dsp import DspConfig, MelSpectrogram, Waveform, load_wav, log_mel, patchify
from .errors import MeltagError
from .extractor import clip_embedding, extract
from .network import Model, ModelConfig, build_model, forward
from .store import load_model, load_registry_model, registry_get, registry_names, save_model
from .tagger import Taggram, compute_taggram, tag_file, top_tags

__version__ = "0.1.0"

__all__ = [
    "DspConfig",
    "MelSpectrogram",
    "Model",
    "ModelConfig",
    "MeltagError",
    "Taggram",
    "Waveform",
    "build_model",
    "clip_embedding",
    "compute_taggram",
    "extract",
    "forward",
    "load_model",
    "load_registry_model",
    "load_wav",
    "log_mel",
    "patchify",
    "registry_get",
    "registry_names",
    "save_model",
    "tag_file",
    "top_tags",
]
