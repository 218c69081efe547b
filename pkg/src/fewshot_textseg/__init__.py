"""Few-shot scene-text segmentation with a visual memory bank and learnable prompts."""
from .afa import PromptFeatureBank, TrainConfig, load_prompt_bank, save_prompt_bank, train
from .backend import Backend, BackendDescriptor, ToyBackend, load_backend, make_toy_backend, resolve_backend, save_backend
from .data import DatasetManifest, SupportSample, load_manifest, make_toy_suite, preprocess, preprocess_mask, select_support
from .errors import (
    ArgumentError,
    BackendMismatchError,
    CapabilityError,
    ConfigurationError,
    DataError,
    TextSegError,
    TrainingDiverged,
)
from .experiment import RunConfig, run_experiment
from .inference import FusedResult, InferenceConfig, MaskGenConfig, fuse, generate_mask, segment, suppress
from .metrics import EvalReport, auroc, fg_iou
from .prompt_space import TemplateSpec, build_population, load_lexicon
from .visual_bank import VisualFeatureBank, build_bank, load_visual_bank, save_visual_bank, visual_score_maps

__all__ = [
    "ArgumentError",
    "Backend",
    "BackendDescriptor",
    "BackendMismatchError",
    "CapabilityError",
    "ConfigurationError",
    "DataError",
    "DatasetManifest",
    "EvalReport",
    "FusedResult",
    "InferenceConfig",
    "MaskGenConfig",
    "PromptFeatureBank",
    "RunConfig",
    "SupportSample",
    "TemplateSpec",
    "TextSegError",
    "ToyBackend",
    "TrainConfig",
    "TrainingDiverged",
    "VisualFeatureBank",
    "auroc",
    "build_bank",
    "build_population",
    "fg_iou",
    "fuse",
    "generate_mask",
    "load_backend",
    "load_lexicon",
    "load_manifest",
    "load_prompt_bank",
    "load_visual_bank",
    "make_toy_backend",
    "make_toy_suite",
    "preprocess",
    "preprocess_mask",
    "resolve_backend",
    "run_experiment",
    "save_backend",
    "save_prompt_bank",
    "save_visual_bank",
    "segment",
    "select_support",
    "suppress",
    "train",
    "visual_score_maps",
]

__version__ = "0.1.0"
