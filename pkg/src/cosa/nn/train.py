"""Full-batch Adam training for the autoencoder and the classifiers."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List

import numpy as np

from ..geometry import batched_chamfer_grad, chamfer
from .layers import cross_entropy, knn_indices
from .models import Classifier, Decoder, Encoder
from .optim import Adam

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, report):
        super().__init__(msg)
        self.report = report


@dataclass
class TrainHyper:
    epochs: int = 1000
    lr: float = 1e-3
    d: int = 32
    h: int = 64
    k: int = 8
    log_every: int = 50


@dataclass
class TrainReport:
    final_loss: float
    metric: float  # held-out CD for the autoencoder, accuracy for classifiers
    epochs: int
    seed: int
    losses: List[float] = field(default_factory=list)

    def as_dict(self):
        return {"final_loss": self.final_loss, "metric": self.metric,
                "epochs": self.epochs, "seed": self.seed}


def _stack(clouds):
    return np.stack([c.points for c in clouds]), np.array([c.label for c in clouds])


def _abort(loss, epoch, losses, seed):
    report = TrainReport(float(loss), float("nan"), epoch + 1, seed, losses)
    raise TrainingDiverged(f"loss became non-finite at epoch {epoch}", report)


def train_autoencoder(manifest, hyper: TrainHyper = TrainHyper(), seed: int = 0):
    """Fit encoder/decoder on the train split with the Chamfer reconstruction loss.

    Returns ``(encoder, decoder, report)``; ``report.metric`` is the mean
    exact Chamfer distance over the test split.
    """
    X, _ = _stack(manifest.load("train"))
    if len(X) == 0:
        raise ValueError("train split is empty")
    ss = np.random.SeedSequence(seed)
    s_enc, s_dec = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    enc = Encoder.init(hyper.d, hyper.h, seed=s_enc)
    dec = Decoder.init(hyper.d, hyper.h, manifest.n, seed=s_dec)
    params = {f"enc.{k}": v for k, v in enc.params.items()}
    params.update({f"dec.{k}": v for k, v in dec.params.items()})
    # the models keep views into ``params`` so Adam's in-place updates reach them
    enc.params = {k[4:]: v for k, v in params.items() if k.startswith("enc.")}
    dec.params = {k[4:]: v for k, v in params.items() if k.startswith("dec.")}
    opt = Adam(lr=hyper.lr)
    losses = []
    for epoch in range(hyper.epochs):
        z, ce = enc.forward(X)
        P, cd = dec.forward(z)
        loss, _, gP = batched_chamfer_grad(X, P)
        if not np.isfinite(loss):
            _abort(loss, epoch, losses, seed)
        losses.append(loss)
        gdec, gz = dec.backward(cd, gP)
        genc, _ = enc.backward(ce, gz)
        grads = {f"enc.{k}": v for k, v in genc.items()}
        grads.update({f"dec.{k}": v for k, v in gdec.items()})
        opt.step(params, grads)
        if epoch % hyper.log_every == 0:
            log.info("ae epoch %d loss %.5f", epoch, loss)
    test = manifest.load("test")
    held = float(np.mean([chamfer(c, dec(enc(c))) for c in test]))
    return enc, dec, TrainReport(losses[-1], held, hyper.epochs, seed, losses)


def accuracy(model, clouds):
    X, y = _stack(clouds)
    return float(np.mean(model.predict(X) == y))


def train_classifier(arch: str, manifest, hyper: TrainHyper = TrainHyper(), seed: int = 0):
    X, y = _stack(manifest.load("train"))
    if len(X) == 0:
        raise ValueError("train split is empty")
    model = Classifier.init(arch, Z=manifest.Z, h=hyper.h, k=hyper.k, seed=seed)
    nbr = knn_indices(X, hyper.k) if arch == "B" else None
    opt = Adam(lr=hyper.lr)
    losses = []
    for epoch in range(hyper.epochs):
        logits, cache = model.forward(X, nbr)
        loss, gl = cross_entropy(logits, y)
        if not np.isfinite(loss):
            _abort(loss, epoch, losses, seed)
        losses.append(loss)
        grads, _ = model.backward(cache, gl)
        opt.step(model.params, grads)
        if epoch % hyper.log_every == 0:
            log.info("clf %s epoch %d loss %.5f", arch, epoch, loss)
    acc = accuracy(model, manifest.load("test"))
    return model, TrainReport(losses[-1], acc, hyper.epochs, seed, losses)
