from .checkpoint import load_checkpoint, save_checkpoint
from .layers import softmax_cross_entropy
from .model import (
    Gradients,
    Mode,
    Model,
    QuantConfig,
    QuantSite,
    QuantSiteConfig,
    Role,
    Tape,
    TapeError,
    backward_quantized,
    forward_quantized,
    mlp,
    small_cnn,
)
from .optim import SGD, Constant, CosineAnneal, StepDecay, lr_at, sgd_step
from .train import evaluate, train_step
