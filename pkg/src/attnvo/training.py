"""Training loop: Adam, early stopping on validation loss, atomic checkpoints."""

import copy
import csv
from dataclasses import asdict, dataclass, field, fields
import logging
import math
import os

import numpy as np
import torch

from . import dataset as ds
from .errors import NumericError
from .network import NetworkConfig, VisualOdometryNet
from .objective import CovarianceMatrix, loss_torch

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    # Adam reference hyperparameters
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_epochs: int = 300
    early_stop_patience: int = 20
    batch_size: int = 4
    seed: int = 0
    attention_enabled: bool = True
    grad_clip_norm: float = 10.0
    # initialise the pose head's output bias at the mean training twist
    init_output_bias: bool = True

    def validate(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class Checkpoint:
    model_state: dict
    optimizer_state: dict
    covariance: CovarianceMatrix
    epoch: int
    val_loss: float
    config: dict = field(default_factory=dict)

    def save(self, path):
        payload = {
            "model_state": self.model_state,
            "optimizer_state": self.optimizer_state,
            "covariance": self.covariance.to_text(),
            "epoch": self.epoch,
            "val_loss": self.val_loss,
            "config": self.config,
        }
        tmp = f"{path}.tmp"
        torch.save(payload, tmp)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path):
        payload = torch.load(path, map_location="cpu", weights_only=False)
        payload["covariance"] = CovarianceMatrix.from_text(payload["covariance"])
        return cls(**payload)

    def build_model(self):
        model = VisualOdometryNet(NetworkConfig.from_dict(self.config["network"]))
        model.load_state_dict(self.model_state)
        model.eval()
        return model


class EarlyStopping:
    """Tracks the best value and how long it has gone without improving."""

    def __init__(self, patience):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = None
        self.bad_epochs = 0

    def update(self, value, epoch):
        if value < self.best:
            self.best = value
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self):
        return self.bad_epochs >= self.patience


def seed_everything(seed):
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))


def make_optimizer(model, cfg: TrainConfig):
    return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate,
                            betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)


def window_losses(model, windows, cov, image_size=ds.IMAGE_SIZE, cache=None):
    """Mean per-pair loss for each window, zero recurrent state per window."""
    sigma_inv = torch.as_tensor(cov.sigma_inv, dtype=torch.float64)
    out = []
    for w in windows:
        frames = w.load(image_size, cache)
        twists, _ = model(frames)
        target = torch.as_tensor(w.relative_twists, dtype=torch.float64)
        out.append(loss_torch(twists, target, sigma_inv).mean())
    return out


def train_step(batch, model, cov, optimizer=None, cfg: TrainConfig = None,
               image_size=ds.IMAGE_SIZE, cache=None, epoch=None):
    """Forward, mean loss over pairs and windows, backward, one update.

    With ``optimizer=None`` gradients are left on the parameters and no update
    happens. Returns the batch loss as a float.
    """
    if not batch:
        raise ValueError("empty batch")
    model.train()
    if optimizer is not None:
        optimizer.zero_grad(set_to_none=True)
    else:
        model.zero_grad(set_to_none=True)
    losses = window_losses(model, batch, cov, image_size, cache)
    for w, l in zip(batch, losses):
        if not torch.isfinite(l):
            raise NumericError(f"non-finite loss at epoch {epoch}, window {w.key}")
    total = torch.stack(losses).mean()
    total.backward()
    if optimizer is not None:
        clip = cfg.grad_clip_norm if cfg is not None else None
        if clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), clip)
        optimizer.step()
    return float(total.detach())


@torch.no_grad()
def evaluate_loss(model, windows, cov, image_size=ds.IMAGE_SIZE, cache=None):
    if not windows:
        return math.nan
    model.eval()
    losses = window_losses(model, windows, cov, image_size, cache)
    return float(torch.stack(losses).mean())


def init_output_bias(model, mean_twist):
    last = model.temporal.head.net[-1]
    with torch.no_grad():
        last.bias.copy_(torch.as_tensor(mean_twist, dtype=last.bias.dtype))


def write_curve(path, rows):
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss"])
        for epoch, tr, va in rows:
            writer.writerow([epoch, repr(tr), repr(va)])
    os.replace(tmp, path)


def read_curve(path):
    with open(path, newline="") as fh:
        return [(int(r["epoch"]), float(r["train_loss"]), float(r["val_loss"]))
                for r in csv.DictReader(fh)]


def train(cfg: TrainConfig, train_windows, val_windows, model, cov, out_dir=None,
          image_size=ds.IMAGE_SIZE, extra_config=None):
    """Run the optimisation loop and return the best-validation checkpoint.

    The curve (epoch 0 = before any update) is kept on ``train.curve`` of the
    returned checkpoint's config and, when ``out_dir`` is given, written to
    ``training_curve.csv`` next to ``best.pt`` and ``last.pt``.
    """
    cfg.validate()
    seed_everything(cfg.seed)
    if cfg.init_output_bias:
        init_output_bias(model, cov.mean_twist)
    optimizer = make_optimizer(model, cfg)
    cache = {}
    config = {"train": asdict(cfg), "network": model.cfg.to_dict(),
              "image_size": list(image_size)}
    if extra_config:
        config.update(extra_config)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        cov.save(os.path.join(out_dir, "covariance.txt"))

    # without validation windows, early stopping watches the training loss
    def val_of(tr_loss):
        if val_windows:
            return evaluate_loss(model, val_windows, cov, image_size, cache)
        return tr_loss

    train_loss = evaluate_loss(model, train_windows, cov, image_size, cache)
    curve = [(0, train_loss, val_of(train_loss))]
    stopper = EarlyStopping(cfg.early_stop_patience)
    best = None
    for epoch in range(1, cfg.max_epochs + 1):
        order = ds.epoch_order(len(train_windows), cfg.seed, epoch)
        batch_losses = []
        for i in range(0, len(order), cfg.batch_size):
            batch = [train_windows[j] for j in order[i:i + cfg.batch_size]]
            batch_losses.append(train_step(batch, model, cov, optimizer, cfg, image_size,
                                           cache, epoch) * len(batch))
        train_loss = sum(batch_losses) / len(train_windows)
        val_loss = val_of(train_loss)
        if not math.isfinite(val_loss):
            raise NumericError(f"non-finite validation loss at epoch {epoch}")
        curve.append((epoch, train_loss, val_loss))
        log.info("epoch %d train %.6g val %.6g", epoch, train_loss, val_loss)
        ckpt = Checkpoint(_copy_state(model.state_dict()), _copy_state(optimizer.state_dict()),
                          cov, epoch, val_loss, dict(config))
        if stopper.update(val_loss, epoch):
            best = ckpt
            if out_dir:
                best.save(os.path.join(out_dir, "best.pt"))
        if out_dir:
            ckpt.save(os.path.join(out_dir, "last.pt"))
            write_curve(os.path.join(out_dir, "training_curve.csv"), curve)
        if stopper.should_stop:
            log.info("early stop at epoch %d (best %d)", epoch, stopper.best_epoch)
            break
    best.config["curve"] = curve
    return best


def _copy_state(state):
    return copy.deepcopy(state)
