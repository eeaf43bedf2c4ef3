"""Small point-cloud networks with hand-written adjoints."""
from .checkpoint import (CheckpointError, load_autoencoder, load_model, save_autoencoder,
                         save_model)
from .gradcheck import GradCheckReport, grad_check
from .layers import cross_entropy
from .models import ARCH_TAGS, Classifier, Decoder, Encoder
from .optim import Adam
from .train import TrainHyper, TrainingDiverged, TrainReport, accuracy, train_autoencoder, train_classifier

__all__ = [
    "ARCH_TAGS", "Adam", "CheckpointError", "Classifier", "Decoder", "Encoder", "GradCheckReport",
    "TrainHyper", "TrainReport", "TrainingDiverged", "accuracy", "cross_entropy", "grad_check",
    "load_autoencoder", "load_model", "save_autoencoder", "save_model", "train_autoencoder",
    "train_classifier",
]
