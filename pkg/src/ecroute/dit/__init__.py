from .accounting import (
    PRESETS,
    ArchSpec,
    activated_param_increment,
    config_report,
    param_report,
    total_param_delta,
)
from .model import (
    BlockParams,
    ModelConfig,
    TextContext,
    adaln_modulate,
    block_params,
    cross_attention,
    dit_block,
    forward_tokens,
    gqa_self_attention,
    init_params,
    model_forward,
    param_shapes,
    timestep_embed,
    velocity_field,
)
from .patches import patchify, unpatchify
