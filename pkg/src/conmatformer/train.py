"""Adam optimization and the epoch training loop."""

import dataclasses
import logging

import numpy as np

from .model import checkpoint_bytes
from .tensor import Tensor, backward, cross_entropy, no_grad, softmax

log = logging.getLogger(__name__)


class TrainingDiverged(Exception):
    """Raised when the loss stops being finite."""


@dataclasses.dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-5
    weight_decay: float = 3e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    decoupled_wd: bool = False
    seed: int = 0

    def validate(self):
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be non-negative")
        return self


@dataclasses.dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def for_params(cls, params):
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params])


def adam_step(params, grads, state, config):
    """One classic Adam update with bias correction, in place.

    Weight decay is coupled by default (added to the gradient before the
    moment updates); decoupled_wd applies it directly to the weights instead.
    """
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    correction1 = 1.0 - b1 ** state.t
    correction2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, dtype=p.dtype)
        if config.weight_decay and not config.decoupled_wd:
            g = g + config.weight_decay * p.data
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / correction1
        v_hat = v / correction2
        if config.decoupled_wd and config.weight_decay:
            p.data -= config.lr * config.weight_decay * p.data
        p.data -= config.lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    return params, state


def _as_batch(samples, dtype=np.float32):
    images = np.stack([s.image for s in samples]).astype(dtype)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return Tensor(images), labels


def evaluate_loss_accuracy(model, samples, batch_size=64):
    """Mean cross-entropy and accuracy without building the tape."""
    total_loss = 0.0
    correct = 0
    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            x, y = _as_batch(chunk)
            logits = model.forward(x, training=False)
            total_loss += float(cross_entropy(logits, y).data) * len(chunk)
            correct += int((logits.data.argmax(axis=1) == y).sum())
    n = len(samples)
    return total_loss / n, correct / n


def train(model, splits, config, callbacks=()):
    """Epoch loop with seeded shuffling; retains the best-validation weights.

    splits is a DatasetSplit; validation may be empty (best tracking then
    follows train accuracy). Each callback is called as cb(epoch, entry,
    model) after every epoch; a truthy return requests an early stop.
    Returns (model, history); the model carries `best_state` (per-parameter
    copies) and `best_checkpoint` bytes of the best epoch.
    """
    config.validate()
    if not splits.train:
        raise ValueError("training requires a non-empty train split")
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    state = AdamState.for_params(params)
    history = []
    best = (-1.0, float("inf"))   # (val accuracy, -val loss) ordering, see below

    for epoch in range(config.epochs):
        order = rng.permutation(len(splits.train))
        dropout_rng = np.random.default_rng([config.seed, epoch])
        epoch_loss = 0.0
        epoch_correct = 0
        for start in range(0, len(order), config.batch_size):
            chunk = [splits.train[i] for i in order[start:start + config.batch_size]]
            x, y = _as_batch(chunk)
            logits = model.forward(x, training=True, rng=dropout_rng)
            loss = cross_entropy(logits, y)
            loss_value = float(loss.data)
            if not np.isfinite(loss_value):
                raise TrainingDiverged(f"non-finite loss {loss_value} at epoch {epoch}")
            epoch_loss += loss_value * len(chunk)
            epoch_correct += int((logits.data.argmax(axis=1) == y).sum())
            backward(loss)
            grads = [p.grad.data for p in params]
            adam_step(params, grads, state, config)
            for p in params:
                p.grad = None
        entry = {
            "epoch": epoch,
            "train_loss": epoch_loss / len(splits.train),
            "train_acc": epoch_correct / len(splits.train),
        }
        if splits.val:
            val_loss, val_acc = evaluate_loss_accuracy(model, splits.val,
                                                       config.batch_size)
            entry["val_loss"] = val_loss
            entry["val_acc"] = val_acc
            score = (val_acc, -val_loss)
        else:
            score = (entry["train_acc"], -entry["train_loss"])
        if score > best:
            best = score
            model.best_checkpoint = checkpoint_bytes(model)
        history.append(entry)
        log.info("epoch %d: %s", epoch, entry)
        if any(cb(epoch, entry, model) for cb in callbacks):
            break
    return model, history


def predict_probs(model, samples, batch_size=64):
    """Softmax probabilities [N, K] for a sample list."""
    chunks = []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            x, _ = _as_batch(samples[start:start + batch_size])
            logits = model.forward(x, training=False)
            chunks.append(softmax(logits, axis=-1).data)
    return np.concatenate(chunks, axis=0)


def history_csv_lines(history):
    if not history:
        return ["epoch"]
    keys = list(history[0].keys())
    lines = [",".join(keys)]
    for entry in history:
        lines.append(",".join(repr(entry[k]) if isinstance(entry[k], float)
                              else str(entry[k]) for k in keys))
    return lines
