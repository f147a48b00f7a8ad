"""streamtx: a desk-scale two-domain streaming transducer laboratory."""

from . import tensor
from .lattice import (
    Alignment,
    RestrictionBand,
    build_band,
    brute_force_loss,
    rnnt_loss,
    rnnt_loss_grad,
)

__all__ = [
    "tensor",
    "Alignment",
    "RestrictionBand",
    "build_band",
    "brute_force_loss",
    "rnnt_loss",
    "rnnt_loss_grad",
]

__version__ = "0.1.0"
