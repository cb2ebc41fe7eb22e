"""Spiking transformer with active filtering attention and gated multi-scale feedforward blocks."""

from .analysis import audit_params, spectrum, verify_prop1, verify_prop2
from .config import RunConfig, load_run_config
from .data import DatasetDescriptor, gen_synthetic, load_cifar_binary, load_idx
from .energy import LayerProfile, energy_report, layer_energy, record_firing_rates
from .model import ModelConfig, SAFformer, count_params, model_forward
from .neuron import LifParams, lif_forward, relaxed_forward, surrogate_grad
from .saf import AttentionWeights, saf_forward, ssa_reference
from .smag import SmagWeights, smag_forward
from .train import TrainConfig, grad_check, loss_and_grad, train_loop

__all__ = [
    "AttentionWeights", "DatasetDescriptor", "LayerProfile", "LifParams", "ModelConfig", "RunConfig",
    "SAFformer", "SmagWeights", "TrainConfig", "audit_params", "count_params", "energy_report",
    "gen_synthetic", "grad_check", "layer_energy", "lif_forward", "load_cifar_binary", "load_idx",
    "load_run_config", "loss_and_grad", "model_forward", "record_firing_rates", "relaxed_forward",
    "saf_forward", "smag_forward", "spectrum", "ssa_reference", "surrogate_grad", "train_loop",
    "verify_prop1", "verify_prop2",
]
