"""Mini-batch training with Adam, per-epoch AFW statistics and early stopping."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .corpus import FeatureSet
from .errors import ConfigurationError, InvariantError
from .fusion_net import FusionNet, NetConfig, OodPolicy, calibrate_policy
from .nn import Adam

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 40
    patience: int = 6
    min_delta: float = 1e-3
    precision: str = "train"
    ood_quantile: float = 0.05


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    def as_dict(self) -> dict:
        return asdict(self)


def model_inputs(net: FusionNet, data: FeatureSet, idx=slice(None)) -> dict:
    v = net.cfg.variant
    return {
        "tfi": data.tfi[idx] if v not in ("iq_cnn", "zc_cnn") else None,
        "zc": data.zc[idx] if v not in ("iq_cnn", "tfi_only") else None,
        "iq": data.iq[idx] if v == "iq_cnn" else None,
    }


def _check_labels(data: FeatureSet, class_count: int, what: str) -> None:
    if len(data) == 0:
        raise ConfigurationError(f"{what} set is empty")
    present = np.unique(data.labels)
    if present.size < 2:
        raise ConfigurationError(f"{what} set needs at least two classes, found {present.tolist()}")
    if present.min() < 0 or present.max() >= class_count:
        raise ConfigurationError(f"{what} labels {present.tolist()} outside 0..{class_count - 1}")


def evaluate_loss(net: FusionNet, data: FeatureSet) -> tuple:
    """(mean cross-entropy, top-1 accuracy) in eval mode."""
    probs = net.predict_proba(**model_inputs(net, data))
    p_true = probs[np.arange(len(data)), data.labels]
    loss = float(-np.mean(np.log(np.maximum(p_true, 1e-12))))
    return loss, float(np.mean(probs.argmax(axis=1) == data.labels))


def train(train_set: FeatureSet, val_set: FeatureSet, net_cfg: NetConfig,
          cfg: TrainConfig = TrainConfig(), seed: int = 0):
    """Fit ``FusionNet(net_cfg)``; returns (net, policy, log).

    Cross-entropy with Adam.  For fused variants the class means of the
    pre-weighting fused map are accumulated over each epoch's forward passes
    and folded into the AFW buffers with EMA momentum ``net_cfg.afw_momentum``
    (the first epoch runs with all scores zero).  The parameters of the epoch
    with the best validation accuracy (ties: lower validation loss) are kept;
    training stops after ``patience`` epochs without improvement.  The OOD
    threshold is calibrated on the validation set afterwards.
    """
    _check_labels(train_set, net_cfg.class_count, "training")
    _check_labels(val_set, net_cfg.class_count, "validation")
    with T.precision(cfg.precision):
        net = FusionNet(net_cfg, seed=seed).cast(cfg.precision)
        opt = Adam(net.parameters(), lr=cfg.lr)
        rng = np.random.default_rng(seed + 7919)
        tlog = TrainLog()
        best = (-math.inf, math.inf)
        best_state = net.state_dict()
        stale = 0
        P = net_cfg.class_count
        for epoch in range(cfg.max_epochs):
            net.train()
            order = rng.permutation(len(train_set))
            sums = np.zeros((P, net_cfg.spatial, net_cfg.spatial, net_cfg.fused_channels))
            counts = np.zeros(P)
            losses = []
            for s in range(0, order.size, cfg.batch_size):
                idx = order[s:s + cfg.batch_size]
                if idx.size < 2:
                    continue  # batch norm needs more than one sample
                capture = {} if net.fused else None
                logits = net(**model_inputs(net, train_set, idx), capture=capture)
                labels = train_set.labels[idx]
                loss = T.cross_entropy(logits, labels)
                opt.zero_grad()
                loss.backward()
                for name, p in net.parameters().items():
                    if p.grad is not None and not np.all(np.isfinite(p.grad)):
                        raise InvariantError(f"non-finite gradient in {name} at epoch {epoch}")
                opt.step()
                losses.append(loss.item())
                if capture is not None:
                    np.add.at(sums, labels, capture["fusion"])
                    np.add.at(counts, labels, 1)
            if net.fused:
                if np.any(counts == 0):
                    raise ConfigurationError("every class must appear in each training epoch")
                net.afw.update_means(sums / counts[:, None, None, None], net_cfg.afw_momentum)
            val_loss, val_acc = evaluate_loss(net, val_set)
            entry = {"epoch": epoch, "loss": float(np.mean(losses)), "val_loss": val_loss, "val_acc": val_acc}
            tlog.epochs.append(entry)
            log.info("epoch %d loss %.4f val_loss %.4f val_acc %.4f", epoch, entry["loss"], val_loss, val_acc)
            if val_acc > best[0] + cfg.min_delta or (abs(val_acc - best[0]) <= cfg.min_delta and val_loss < best[1]):
                best = (val_acc, val_loss)
                best_state = net.state_dict()
                tlog.best_epoch = epoch
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    tlog.stopped_early = True
                    break
        net.load_state_dict(best_state)
        net.eval()
        probs = net.predict_proba(**model_inputs(net, val_set))
        policy = calibrate_policy(probs.max(axis=1), cfg.ood_quantile)
    return net, policy, tlog


def fit_policy(net: FusionNet, val_set: FeatureSet, quantile: float = 0.05) -> OodPolicy:
    probs = net.predict_proba(**model_inputs(net, val_set))
    return calibrate_policy(probs.max(axis=1), quantile)
