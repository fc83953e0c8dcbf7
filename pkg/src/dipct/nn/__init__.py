from .checkpoint import load_checkpoint, save_checkpoint
from .network import NetworkConfig, ParamStore, build_network, count_parameters, forward, init_params, make_input
from .optim import AdamState, TapeError, adam_step, backward, clip_params

__all__ = [
    "AdamState",
    "NetworkConfig",
    "ParamStore",
    "TapeError",
    "adam_step",
    "backward",
    "build_network",
    "clip_params",
    "count_parameters",
    "forward",
    "init_params",
    "load_checkpoint",
    "make_input",
    "save_checkpoint",
]
