"""Multi-source TDOA estimation toolkit.

Classical GCC-PHAT plus a learned, channel-wise correlation feature
extractor trained with permutation-invariant TDOA classification, verified
end-to-end on synthetic microphone-array scenes.
"""

from ngccphat.backend import BACKEND
from ngccphat.model import ModelConfig, NgccPhatModel
from ngccphat.scene import (
    AcousticScene,
    ArrayGeometry,
    DatasetSpec,
    max_tdoa,
    tetrahedral_array,
    true_tdoas,
)
from ngccphat.signal_core import gcc_phat, gcc_phat_direct, top_k_peaks

__all__ = [
    "BACKEND",
    "ModelConfig",
    "NgccPhatModel",
    "AcousticScene",
    "ArrayGeometry",
    "DatasetSpec",
    "max_tdoa",
    "tetrahedral_array",
    "true_tdoas",
    "gcc_phat",
    "gcc_phat_direct",
    "top_k_peaks",
]

__version__ = "0.1.0"
