"""One optimization step and evaluation."""

from __future__ import annotations

import numpy as np

from .layers import softmax_cross_entropy
from .model import Mode, Model
from .optim import SGD


def train_step(model: Model, batch, opt: SGD) -> tuple[float, dict]:
    """forward -> cross-entropy -> backward -> SGD update.

    Returns the loss and a metrics dict with batch accuracy and, per
    quantizer site, the range used this step and its saturation ratio.
    """
    x, y = batch
    logits, tape = model.forward(x, Mode.TRAIN)
    loss, g = softmax_cross_entropy(logits, y)
    grads = model.backward(tape, g)
    opt.step(model.named_params(), grads.params)
    model.step += 1
    metrics = {
        "loss": loss,
        "acc": float(np.mean(np.argmax(logits, axis=1) == y)),
        "sites": {
            name: {"q_min": s.last_range[0], "q_max": s.last_range[1], "saturation": s.last_saturation}
            for name, s in model.sites.items()
            if s.last_range is not None
        },
    }
    return loss, metrics


def evaluate(model: Model, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> tuple[float, float]:
    """Eval-mode loss and accuracy; estimator state is left untouched."""
    n = len(y)
    total_loss, correct = 0.0, 0
    for i in range(0, n, batch_size):
        xb, yb = x[i : i + batch_size], y[i : i + batch_size]
        logits, _ = model.forward(xb, Mode.EVAL)
        loss, _ = softmax_cross_entropy(logits, yb)
        total_loss += loss * len(yb)
        correct += int(np.sum(np.argmax(logits, axis=1) == yb))
    return total_loss / n, correct / n
