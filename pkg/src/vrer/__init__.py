"""Policy-gradient training with variance-reduction experience replay."""

from .envs import ChainMDP, CartPoleEnv, VecCartPole, VecChain, exact_objective, exact_policy_gradient
from .policy import PolicyParams, PolicySnapshot, CriticParams, init_policy, init_critic
from .replay import IterationBatch, ReplayBuffer, TrainingSet, build_training_set, downsample
from .selection import SelectionConfig, build_reuse_set
from .trainer import TrainConfig, train, tabular_convergence_probe

__version__ = "0.1.0"
