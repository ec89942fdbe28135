"""segkit: a small CPU engine for MoNet / U-Net segmentation.

Ships convolution layers with hand-written backward passes, Nesterov-Adam,
soft-Dice training, a deterministic checkpoint format and a federated
averaging simulator that counts bytes on the wire.
"""
from segkit.arch import ArchSpec, build, count_params, receptive_field
from segkit.checkpoint import load, payload_size, save
from segkit.kernels import BACKEND
from segkit.tensor import Prng

__version__ = "0.1.0"

__all__ = [
    "ArchSpec",
    "BACKEND",
    "Prng",
    "build",
    "count_params",
    "load",
    "payload_size",
    "receptive_field",
    "save",
]
