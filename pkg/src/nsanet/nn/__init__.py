from . import ops
from .checkpoint import load_tensors, save_tensors
from .gradcheck import GradcheckReport, gradcheck
from .losses import VOID, ce_loss, focal_loss, make_loss, wce_loss
from .optim import Adam, adam_step

__all__ = [
    "ops", "load_tensors", "save_tensors", "GradcheckReport", "gradcheck",
    "VOID", "ce_loss", "focal_loss", "make_loss", "wce_loss", "Adam", "adam_step",
]
