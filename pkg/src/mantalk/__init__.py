"""Talking-head generation with multi-modal adaptive normalization, at desk scale."""
from .errors import MantalkError
from .man_norm import ManBlock, ManConfig, gate_weights, instance_normalize, man_combine
from .gen_disc import Generator, MultiScaleDiscriminator, TalkingHeadModel, run_inference
from .config import RunConfig, load_config

__version__ = "0.1.0"

__all__ = [
    "MantalkError",
    "ManBlock",
    "ManConfig",
    "gate_weights",
    "instance_normalize",
    "man_combine",
    "Generator",
    "MultiScaleDiscriminator",
    "TalkingHeadModel",
    "run_inference",
    "RunConfig",
    "load_config",
]
