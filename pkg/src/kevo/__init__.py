"""Knowledge evolution: fit/reset hypothesis splitting and re-training of CNNs in numpy."""
from .engine import SeededRng, cosine_lr, kaiming_uniform_init, sgd_momentum_step
from .graph import LayerNode, NetworkGraph, build_architecture, forward, init_params, validate_and_shape
from .splitting import (SplitMask, compute_sparsity, extract_slim, kels_split, masked_dense,
                        profile_network, wels_split)
from .evolve import GenerationLog, TrainConfig, evaluate_model, reinit_reset, run_knowledge_evolution, train_generation
from .checkpoint import load_checkpoint, save_checkpoint

__version__ = "0.1.0"
