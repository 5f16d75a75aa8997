"""Supervised graph-structure learning with bilinear attention on correlation matrices."""

from .bamnet import BamNet, ModelConfig, make_model, model_forward, predict
from .cpdagnet import VStructureNet, assemble_cpdag, estimate_cpdag
from .evaluation import auc_pr, run_benchmark, shd_cpdag, shd_undirected
from .graphs import (
    Cpdag,
    DagSpec,
    ThreeClassLabels,
    apply_meek_rules,
    dag_to_cpdag,
    derive_three_class_labels,
    sample_er_dag,
)
from .semgen import generate_test_data, generate_training_pair, simulate_sem
from .trainer import TrainConfig, loss_total, train_on_the_fly

__version__ = "0.1.0"
