"""Temporal action localization with direction-aware grouped attention.

A numpy reverse-mode autodiff core (``tensorgrad``) carries a network that
predicts per-frame start/end probabilities and a start x end proposal
confidence map, with frame-level and proposal-level attention blocks that
split context by temporal direction.
"""

from .config import RunConfig, load_config
from .fpcm import FpcmParams, fpcm_block, fpcm_forward
from .infer import Proposal, SoftNmsConfig, soft_nms
from .metrics import Detection, EvalConfig, GroundTruth, map_at
from .net import NetworkOutputs, PcmNetConfig, PcmNetParams, pcmnet_forward
from .posenc import pe2d, sinusoidal_pe
from .ppcm import PpcmParams, ppcm_forward, validity_mask
from .supervision import Targets, total_loss

__version__ = "0.1.0"

__all__ = [
    "RunConfig", "load_config", "FpcmParams", "fpcm_block", "fpcm_forward",
    "Proposal", "SoftNmsConfig", "soft_nms", "Detection", "EvalConfig", "GroundTruth",
    "map_at", "NetworkOutputs", "PcmNetConfig", "PcmNetParams", "pcmnet_forward",
    "pe2d", "sinusoidal_pe", "PpcmParams", "ppcm_forward", "validity_mask",
    "Targets", "total_loss",
]
