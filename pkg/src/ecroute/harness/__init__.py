from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, TrainConfig, load_config
from .data import SyntheticDataset, SyntheticSample, gen_dataset
from .masking import mask_tokens, regroup_tokens, sample_keep, ungroup_tokens
from .optim import RMSPropState, learning_rate_at, optimizer_step
from .train import TrainResult, TrainingDiverged, smoothed, train_loop
