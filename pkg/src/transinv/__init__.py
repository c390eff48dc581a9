"""Measuring learned translation invariance in small VGG-style CNNs, on a numpy autodiff engine."""
from .tensor import Tensor, backward, grad_check, precision
from .model import Model, ModelSpec, build, forward, load_checkpoint, preset, save_checkpoint
from .optim import Adam
from .data import (AreaSegregated, BatchStream, DatasetConfig, DESK, FixedLocation, FullyTranslated, ItemBank,
                   load_idx, synth_glyph_bank)
from .protocol import (ExperimentManifest, RunRecord, cosine_profile, evaluate_grid, fine_tune,
                       interpolate_heatmap, normalized_accuracy, run_experiment, train_to_criterion)

__version__ = "0.1.0"
