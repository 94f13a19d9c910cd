"""Repairing image classifiers against universal adversarial perturbations.

The pipeline trains a small probed classifier, crafts universal perturbations
against it, measures how they collapse layer-wise activation entropy, and
finetunes the model on its own low-entropy samples so that no single feature
can dominate the decision.
"""

from .attack import (
    AttackConfig,
    craft,
    craft_adaptive_uap,
    craft_nontargeted_uap,
    craft_patch_uap,
    craft_spgd_uap,
    craft_targeted_uap,
)
from .data import BlobConfig, LabeledDataset, load_dataset, sample_clean_subset
from .defense import DefenseConfig, adversarial_training_baseline, democratic_training, sample_generator
from .entropy import AnalysisReport, layer_entropy, run_entropy_analysis
from .evaluation import (
    EvalReport,
    adaptive_reattack_protocol,
    adversarial_accuracy,
    epsilon_sweep,
    evaluate,
    nontargeted_success_rate,
    success_rate,
)
from .model import ProbedClassifier, TrainConfig, build_architecture, load_checkpoint, save_checkpoint, train_baseline
from .perturbation import Perturbation, clamp_to_budget, load_perturbation, save_perturbation

__version__ = "0.1.0"
