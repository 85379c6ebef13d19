"""Two-branch (plain + dilated convolution) CNN for weed/crop image classification, in numpy."""
from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .data import ImagePreprocessor, scan_dataset, split_dataset
from .estimator import WeedNetClassifier
from .graph import Graph, cross_entropy
from .model import CLASS_NAMES, ArchitectureConfig, build, format_summary, summarize
from .optim import Adam, AdamHyper, AdamState, adam_step
from .training import TrainConfig, confusion_matrix, evaluate, predict, train

__version__ = "0.1.0"

__all__ = [
    "Adam", "AdamHyper", "AdamState", "ArchitectureConfig", "CLASS_NAMES", "Graph", "ImagePreprocessor",
    "TrainConfig", "WeedNetClassifier", "adam_step", "build", "confusion_matrix", "cross_entropy", "evaluate",
    "format_summary", "load_checkpoint", "predict", "read_checkpoint", "save_checkpoint", "scan_dataset",
    "split_dataset", "summarize", "train",
]
