"""Client-side local training: FedeCouple and the baseline procedures."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional

import numpy as np

from .data import Dataset, minibatches
from .errors import ConfigError, FedlabError
from .models import (
    DecoupledModel,
    LossSpec,
    TrainTarget,
    backward_selective,
    classify,
    extract,
    forward,
    head_loss_and_grad,
)
from .numerics import ParamVector, sgd_step

ALGORITHMS = ("fedecouple", "local", "fedavg", "ftfedavg", "fedprox", "fedrep")
TOGGLES = ("gfa", "glf", "gpc", "da")


@dataclass
class Hyperparams:
    eta: float = 0.05
    lam: float = 0.8
    mu: float = 2.0
    tau: float = 2.0
    e_cl: int = 5
    e_fe: int = 5
    batch_size: int = 32
    gfa: bool = True
    glf: bool = True
    gpc: bool = True
    da: bool = True
    # KD teacher follows the locally adapted global head; False pins it to
    # the round-start global head.
    dynamic_teacher: bool = True
    # Baselines.
    local_epochs: int = 5
    prox_mu: float = 0.01
    ft_epochs: int = 1

    def __post_init__(self):
        if not self.eta >= 0:
            raise ConfigError(f"eta must be >= 0, got {self.eta}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if self.lam < 0 or self.mu < 0 or self.prox_mu < 0:
            raise ConfigError("lam, mu and prox_mu must be >= 0")
        if min(self.e_cl, self.e_fe, self.local_epochs, self.batch_size) < 1 or self.ft_epochs < 0:
            raise ConfigError("epoch counts and batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ClientState:
    cid: int
    train: np.ndarray
    test: np.ndarray
    model: DecoupledModel
    anchors: dict[int, np.ndarray] = field(default_factory=dict)


@dataclass
class StepRecord:
    phase: str
    epoch: int
    ce: float
    kd: float
    center: float
    rows: int

    @property
    def total(self) -> float:
        return self.ce + self.kd + self.center


@dataclass
class LocalRoundResult:
    cid: int
    model: DecoupledModel
    upload: ParamVector
    num_samples: int
    steps: list[StepRecord]
    # Model scored as the client's personalized model; differs from ``model``
    # only for FT-FedAvg.
    eval_model: Optional[DecoupledModel] = None

    @property
    def personalized(self) -> DecoupledModel:
        return self.model if self.eval_model is None else self.eval_model

    def term_means(self) -> dict[str, float]:
        if not self.steps:
            return {"ce": 0.0, "kd": 0.0, "center": 0.0, "loss": 0.0, "rows": 0.0}
        n = len(self.steps)
        ce = sum(s.ce for s in self.steps) / n
        kd = sum(s.kd for s in self.steps) / n
        center = sum(s.center for s in self.steps) / n
        return {
            "ce": ce,
            "kd": kd,
            "center": center,
            "loss": ce + kd + center,
            "rows": max(s.rows for s in self.steps),
        }

    def epoch_trace(self) -> list[dict]:
        """Per-(phase, epoch) means of the loss terms, in first-seen order."""
        groups: dict[tuple[str, int], dict] = {}
        for s in self.steps:
            e = groups.setdefault((s.phase, s.epoch),
                                  {"phase": s.phase, "epoch": s.epoch, "ce": 0.0, "kd": 0.0, "center": 0.0,
                                   "steps": 0})
            e["ce"] += s.ce
            e["kd"] += s.kd
            e["center"] += s.center
            e["steps"] += 1
        out = list(groups.values())
        for e in out:
            for k in ("ce", "kd", "center"):
                e[k] /= e["steps"]
        return out


def compute_anchors(theta_global: ParamVector, ds: Dataset, idx: np.ndarray, slope: float) -> dict[int, np.ndarray]:
    """Per-class mean feature of ``ds[idx]`` under the frozen global extractor."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        raise FedlabError("cannot compute anchors on an empty split")
    feats = extract(theta_global, ds.samples[idx], slope)
    labels = ds.labels[idx]
    return {int(c): feats[labels == c].mean(axis=0) for c in np.unique(labels)}


def anchor_distance(theta: ParamVector, anchors: Mapping[int, np.ndarray], ds: Dataset, idx: np.ndarray,
                    slope: float) -> float:
    """Mean Euclidean distance from features of ``ds[idx]`` to their class anchor.

    Samples whose class has no anchor are skipped; NaN if none remain.
    """
    idx = np.asarray(idx, dtype=np.int64)
    keep = np.array([int(y) in anchors for y in ds.labels[idx]], dtype=bool)
    if not keep.any():
        return float("nan")
    idx = idx[keep]
    feats = extract(theta, ds.samples[idx], slope)
    targets = np.stack([anchors[int(y)] for y in ds.labels[idx]])
    return float(np.linalg.norm(feats - targets, axis=1).mean())


def evaluate(model: DecoupledModel, ds: Dataset, idx: np.ndarray) -> float:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        raise FedlabError("evaluate needs a nonempty split")
    pred = np.argmax(forward(model, ds.samples[idx]), axis=1)
    return float((pred == ds.labels[idx]).mean())


# ---------------------------------------------------------------------------
# shared training loops
# ---------------------------------------------------------------------------

class _Batcher:
    """Draws epochs from one batching stream and one augmentation stream."""

    def __init__(self, ds: Dataset, idx: np.ndarray, hp: Hyperparams, gen: np.random.Generator,
                 aug_gen: Optional[np.random.Generator], augment: bool):
        self.ds, self.idx, self.hp = ds, idx, hp
        self.gen = gen
        self.aug_gen = aug_gen if aug_gen is not None else gen
        self.augment = augment

    def epoch(self):
        return minibatches(self.ds, self.idx, self.hp.batch_size, self.gen, self.augment, self.aug_gen)


def _head_epoch(model: DecoupledModel, batcher: _Batcher, eta: float, steps: list[StepRecord],
                phase: str, epoch: int) -> DecoupledModel:
    slope = model.arch.leaky_slope
    phi = model.classifier
    for x, y in batcher.epoch():
        h = extract(model.extractor, x, slope)
        terms, g_phi, _ = head_loss_and_grad(phi, h, y, LossSpec())
        phi = sgd_step(phi, g_phi, eta)
        steps.append(StepRecord(phase, epoch, terms.ce, 0.0, 0.0, len(y)))
    return model.replace(classifier=phi)


def _body_epoch(model: DecoupledModel, batcher: _Batcher, eta: float, steps: list[StepRecord], phase: str,
                epoch: int, mu: float = 0.0, anchors: Optional[Mapping[int, np.ndarray]] = None) -> ParamVector:
    """One epoch of extractor-only updates; returns the new extractor."""
    theta = model.extractor
    spec = LossSpec(center_weight=mu, anchors=anchors)
    for x, y in batcher.epoch():
        terms, g = backward_selective(model.replace(extractor=theta), x, y, spec, TrainTarget.EXTRACTOR)
        theta = sgd_step(theta, g.extractor, eta)
        steps.append(StepRecord(phase, epoch, terms.ce, 0.0, terms.center, len(y)))
    return theta


def _full_epoch(model: DecoupledModel, batcher: _Batcher, eta: float, steps: list[StepRecord], phase: str,
                epoch: int, prox_mu: float = 0.0, prox_center: Optional[ParamVector] = None) -> DecoupledModel:
    params = model.params()
    for x, y in batcher.epoch():
        terms, g = backward_selective(model.with_params(params), x, y, LossSpec(), TrainTarget.BOTH)
        grads = g.params()
        prox = 0.0
        if prox_mu:
            diff = params.combine(prox_center, lambda a, b: a - b)
            grads = grads.combine(diff, lambda gg, d: gg + prox_mu * d)
            prox = 0.5 * prox_mu * float(diff.flatten() @ diff.flatten())
        params = sgd_step(params, grads, eta)
        steps.append(StepRecord(phase, epoch, terms.ce + prox, 0.0, 0.0, len(y)))
    return model.with_params(params)


# ---------------------------------------------------------------------------
# FedeCouple
# ---------------------------------------------------------------------------

def fedecouple_local_round(
    client: ClientState,
    ds: Dataset,
    omega_global: DecoupledModel,
    hp: Hyperparams,
    gen: np.random.Generator,
    aug_gen: Optional[np.random.Generator] = None,
) -> LocalRoundResult:
    slope = omega_global.arch.leaky_slope
    batcher = _Batcher(ds, client.train, hp, gen, aug_gen, hp.da)
    steps: list[StepRecord] = []
    theta_i = client.model.extractor
    phi_i = client.model.classifier
    phi_start = omega_global.classifier
    phi_gi = phi_start.copy()
    kd_weight = hp.lam if hp.gpc else 0.0

    # Classifier phase: features come from the previous personalized extractor.
    for e in range(hp.e_cl):
        for x, y in batcher.epoch():
            h = extract(theta_i, x, slope)
            teacher = None
            if kd_weight:
                teacher = classify(phi_gi if hp.dynamic_teacher else phi_start, h)
            spec = LossSpec(kd_weight=kd_weight, tau=hp.tau, teacher_logits=teacher)
            terms, g_phi, _ = head_loss_and_grad(phi_i, h, y, spec)
            phi_i = sgd_step(phi_i, g_phi, hp.eta)
            steps.append(StepRecord("local_head", e, terms.ce, terms.kd, 0.0, len(y)))
            if hp.gpc:
                g_terms, g_phi_g, _ = head_loss_and_grad(phi_gi, h, y, LossSpec())
                phi_gi = sgd_step(phi_gi, g_phi_g, hp.eta)
                steps.append(StepRecord("global_head", e, g_terms.ce, 0.0, 0.0, len(y)))

    # Extractor phase: restart from the global extractor.
    theta_i = omega_global.extractor
    anchors = None
    mu = hp.mu if hp.gfa else 0.0
    if mu:
        anchors = compute_anchors(omega_global.extractor, ds, client.train, slope)
    client.anchors = anchors or {}
    if hp.glf:
        frozen = DecoupledModel(omega_global.arch, theta_i, phi_start)
        theta_i = _body_epoch(frozen, batcher, hp.eta, steps, "body_frozen_head", 0, mu, anchors)
    for e in range(hp.e_fe):
        theta_i = _body_epoch(DecoupledModel(omega_global.arch, theta_i, phi_i), batcher, hp.eta, steps,
                              "body_local_head", e, mu, anchors)

    model = DecoupledModel(omega_global.arch, theta_i, phi_i)
    return LocalRoundResult(client.cid, model, model.params(), len(client.train), steps)


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------

def baseline_local_round(
    kind: str,
    client: ClientState,
    ds: Dataset,
    omega_global: DecoupledModel,
    hp: Hyperparams,
    gen: np.random.Generator,
    aug_gen: Optional[np.random.Generator] = None,
) -> LocalRoundResult:
    batcher = _Batcher(ds, client.train, hp, gen, aug_gen, False)
    steps: list[StepRecord] = []
    n = len(client.train)

    if kind == "local":
        model = client.model
        for e in range(hp.e_cl + hp.e_fe):
            model = _full_epoch(model, batcher, hp.eta, steps, "full", e)
        return LocalRoundResult(client.cid, model, model.params(), n, steps)

    if kind in ("fedavg", "ftfedavg", "fedprox"):
        prox_mu = hp.prox_mu if kind == "fedprox" else 0.0
        center = omega_global.params()
        model = omega_global
        for e in range(hp.local_epochs):
            model = _full_epoch(model, batcher, hp.eta, steps, "full", e, prox_mu, center)
        result = LocalRoundResult(client.cid, model, model.params(), n, steps)
        if kind == "ftfedavg":
            tuned = model
            for e in range(hp.ft_epochs):
                tuned = _full_epoch(tuned, batcher, hp.eta, [], "finetune", e)
            result.eval_model = tuned
        return result

    if kind == "fedrep":
        model = client.model.replace(extractor=omega_global.extractor)
        for e in range(hp.e_cl):
            model = _head_epoch(model, batcher, hp.eta, steps, "local_head", e)
        for e in range(hp.e_fe):
            model = model.replace(extractor=_body_epoch(model, batcher, hp.eta, steps, "body_local_head", e))
        return LocalRoundResult(client.cid, model, model.extractor.copy(), n, steps)

    raise ConfigError(f"unknown baseline {kind!r}")


def local_round(kind: str, client: ClientState, ds: Dataset, omega_global: DecoupledModel, hp: Hyperparams,
                gen: np.random.Generator, aug_gen: Optional[np.random.Generator] = None) -> LocalRoundResult:
    if kind == "fedecouple":
        return fedecouple_local_round(client, ds, omega_global, hp, gen, aug_gen)
    return baseline_local_round(kind, client, ds, omega_global, hp, gen, aug_gen)
