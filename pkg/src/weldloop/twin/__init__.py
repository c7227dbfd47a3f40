from weldloop.twin.mlp import MLP, polyak_update
from weldloop.twin.policy import TwinPolicy, export_weights, fake_quant_forward
from weldloop.twin.replay import Batch, ReplayBuffer, Transition
from weldloop.twin.sac import SACConfig, SACLearner, TrainingDiverged, critic_target

__all__ = [
    "MLP", "polyak_update", "TwinPolicy", "export_weights", "fake_quant_forward",
    "Batch", "ReplayBuffer", "Transition", "SACConfig", "SACLearner", "TrainingDiverged", "critic_target",
]
