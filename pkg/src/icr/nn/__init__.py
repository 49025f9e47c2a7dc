from .tensor import Tensor, no_grad
from .unet import ResUNet3d, UNetConfig, load_checkpoint, save_checkpoint
from .losses import bce_loss, dice_bce_loss, dice_loss
from .optim import AdamW, cosine_lr

__all__ = [
    "Tensor",
    "no_grad",
    "ResUNet3d",
    "UNetConfig",
    "load_checkpoint",
    "save_checkpoint",
    "bce_loss",
    "dice_bce_loss",
    "dice_loss",
    "AdamW",
    "cosine_lr",
]
