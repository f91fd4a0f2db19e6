"""Decoupled MLP: a feature extractor (all affine+LeakyReLU layers) and a
single affine classifier head on top of it."""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from . import rng as rngmod
from .errors import ConfigError, DimensionError, FormatError
from .numerics import (
    ParamVector,
    affine_backward,
    affine_forward,
    as_tensor,
    center_loss,
    cross_entropy,
    kd_loss,
    leaky_relu,
    leaky_relu_grad,
)


@dataclass(frozen=True)
class ModelArch:
    input_dim: int
    num_classes: int
    hidden_dims: tuple[int, ...] = (128, 128)
    feature_dim: int = 128
    leaky_slope: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, self.num_classes, self.feature_dim, *self.hidden_dims)
        if any(int(d) < 1 for d in dims):
            raise ConfigError(f"all model dimensions must be >= 1, got {self}")
        if not 0 < self.leaky_slope < 1:
            raise ConfigError(f"leaky_slope must lie in (0,1), got {self.leaky_slope}")

    @property
    def extractor_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.feature_dim)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d


@dataclass(frozen=True)
class DecoupledModel:
    arch: ModelArch
    extractor: ParamVector
    classifier: ParamVector

    def params(self) -> ParamVector:
        """Extractor segments then classifier segments, as one vector."""
        return ParamVector(
            [(f"extractor.{n}", a) for n, a in self.extractor]
            + [(f"classifier.{n}", a) for n, a in self.classifier]
        )

    def with_params(self, params: ParamVector) -> "DecoupledModel":
        self.params().check_layout(params)
        ext, cls = [], []
        for name, arr in params:
            part, _, rest = name.partition(".")
            (ext if part == "extractor" else cls).append((rest, arr))
        return DecoupledModel(self.arch, ParamVector(ext), ParamVector(cls))

    def replace(self, extractor: Optional[ParamVector] = None, classifier: Optional[ParamVector] = None):
        return DecoupledModel(
            self.arch,
            self.extractor if extractor is None else extractor,
            self.classifier if classifier is None else classifier,
        )

    def copy(self) -> "DecoupledModel":
        return DecoupledModel(self.arch, self.extractor.copy(), self.classifier.copy())

    def bitwise_equal(self, other: "DecoupledModel") -> bool:
        return self.extractor.bitwise_equal(other.extractor) and self.classifier.bitwise_equal(other.classifier)


def _glorot(gen: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return gen.uniform(-bound, bound, size=(fan_in, fan_out))


def init_model(arch: ModelArch, seed: int) -> DecoupledModel:
    gen = rngmod.stream(seed, "init")
    dims = arch.extractor_dims
    ext = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        ext.append((f"layer{i}.weight", _glorot(gen, a, b)))
        ext.append((f"layer{i}.bias", np.zeros(b)))
    head = [
        ("head.weight", _glorot(gen, arch.feature_dim, arch.num_classes)),
        ("head.bias", np.zeros(arch.num_classes)),
    ]
    return DecoupledModel(arch, ParamVector(ext), ParamVector(head))


def _layers(theta: ParamVector):
    arrs = theta.arrays()
    return [(arrs[i], arrs[i + 1]) for i in range(0, len(arrs), 2)]


def _extract_cached(theta: ParamVector, x: np.ndarray, slope: float):
    """Forward through the extractor keeping (input, pre-activation) per layer."""
    x = as_tensor(x)
    layers = _layers(theta)
    if x.ndim != 2 or x.shape[1] != layers[0][0].shape[0]:
        raise DimensionError(f"extractor expects input width {layers[0][0].shape[0]}, got shape {x.shape}")
    cache = []
    h = x
    for w, b in layers:
        z = affine_forward(h, w, b)
        cache.append((h, z))
        h = leaky_relu(z, slope)
    return h, cache


def extract(theta: ParamVector, x: np.ndarray, slope: float = 0.01) -> np.ndarray:
    return _extract_cached(theta, x, slope)[0]


def classify(phi: ParamVector, h: np.ndarray) -> np.ndarray:
    w, b = phi.arrays()
    h = as_tensor(h)
    if h.ndim != 2 or h.shape[1] != w.shape[0]:
        raise DimensionError(f"classifier expects feature width {w.shape[0]}, got shape {h.shape}")
    return affine_forward(h, w, b)


def forward(model: DecoupledModel, x: np.ndarray) -> np.ndarray:
    return classify(model.classifier, extract(model.extractor, x, model.arch.leaky_slope))


class TrainTarget(enum.Enum):
    EXTRACTOR = "extractor"
    CLASSIFIER = "classifier"
    BOTH = "both"


@dataclass
class LossSpec:
    """Which loss terms are active, with their weights and auxiliary inputs.

    ``kd_weight`` multiplies KL(teacher || student) at temperature ``tau``;
    ``center_weight`` multiplies the anchor center loss on the features.
    """

    ce_weight: float = 1.0
    kd_weight: float = 0.0
    tau: float = 2.0
    teacher_logits: Optional[np.ndarray] = None
    center_weight: float = 0.0
    anchors: Optional[Mapping[int, np.ndarray]] = None

    def validate(self) -> None:
        if self.kd_weight and self.teacher_logits is None:
            raise ConfigError("kd term requested without teacher logits")
        if self.center_weight and self.anchors is None:
            raise ConfigError("center term requested without anchors")


@dataclass
class LossTerms:
    """Weighted loss components of one evaluation (kd and center already scaled)."""

    ce: float = 0.0
    kd: float = 0.0
    center: float = 0.0

    @property
    def total(self) -> float:
        return self.ce + self.kd + self.center


def head_loss_and_grad(phi: ParamVector, h: np.ndarray, labels, spec: LossSpec):
    """Loss terms, d(loss)/d(phi) and d(loss)/d(features) for a fixed feature batch."""
    spec.validate()
    w, _ = phi.arrays()
    logits = classify(phi, h)
    terms = LossTerms()
    g_logits = np.zeros_like(logits)
    if spec.ce_weight:
        ce, g = cross_entropy(logits, labels)
        terms.ce = spec.ce_weight * ce
        g_logits += spec.ce_weight * g
    if spec.kd_weight:
        kd, g = kd_loss(spec.teacher_logits, logits, spec.tau)
        terms.kd = spec.kd_weight * kd
        g_logits += spec.kd_weight * g
    g_h, g_w, g_b = affine_backward(h, w, g_logits)
    return terms, ParamVector([("head.weight", g_w), ("head.bias", g_b)]), g_h


def backward_selective(
    model: DecoupledModel,
    x: np.ndarray,
    labels,
    spec: LossSpec,
    target: TrainTarget = TrainTarget.BOTH,
) -> tuple[LossTerms, DecoupledModel]:
    """Loss terms and gradients (packed as a DecoupledModel) for ``target``.

    Both components take part in the forward pass; the component that is not
    being trained gets an all-zero gradient.
    """
    spec.validate()
    slope = model.arch.leaky_slope
    h, cache = _extract_cached(model.extractor, x, slope)
    terms, g_phi, g_h = head_loss_and_grad(model.classifier, h, labels, spec)
    if spec.center_weight:
        c, g = center_loss(h, labels, spec.anchors)
        terms.center = spec.center_weight * c
        g_h = g_h + spec.center_weight * g

    if target is TrainTarget.CLASSIFIER:
        return terms, DecoupledModel(model.arch, model.extractor.zeros_like(), g_phi)

    grads = []
    g = g_h
    layers = _layers(model.extractor)
    for (w, _), (inp, z) in zip(reversed(layers), reversed(cache)):
        g = g * leaky_relu_grad(z, slope)
        g_in, g_w, g_b = affine_backward(inp, w, g)
        grads.append((g_w, g_b))
        g = g_in
    grads.reverse()
    g_theta = ParamVector(
        (name, arr) for name, arr in zip(model.extractor.names, (a for pair in grads for a in pair))
    )
    if target is TrainTarget.EXTRACTOR:
        g_phi = model.classifier.zeros_like()
    return terms, DecoupledModel(model.arch, g_theta, g_phi)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "fedlab-model/1"


def model_to_dict(model: DecoupledModel) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "arch": model.arch.to_dict(),
        "segments": [
            {"name": name, "shape": list(arr.shape), "values": arr.ravel().tolist()}
            for name, arr in model.params()
        ],
    }


def model_from_dict(doc: dict) -> DecoupledModel:
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"unknown checkpoint format {doc.get('format')!r}")
    arch = ModelArch(**{**doc["arch"], "hidden_dims": tuple(doc["arch"]["hidden_dims"])})
    template = init_model(arch, 0).params()
    segs = []
    for seg in doc["segments"]:
        values = np.asarray(seg["values"], dtype=np.float64)
        shape = tuple(seg["shape"])
        if values.size != int(np.prod(shape)):
            raise FormatError(f"segment {seg['name']} has {values.size} values for shape {shape}")
        segs.append((seg["name"], values.reshape(shape)))
    params = ParamVector(segs)
    if params.layout != template.layout:
        raise FormatError("checkpoint segments do not match its architecture")
    return init_model(arch, 0).with_params(params)


def save_model(model: DecoupledModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)))


def load_model(path: str | Path) -> DecoupledModel:
    return model_from_dict(json.loads(Path(path).read_text()))
