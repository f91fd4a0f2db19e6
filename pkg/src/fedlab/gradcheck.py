"""Finite-difference oracle suite for every analytic gradient in fedlab."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .models import LossSpec, ModelArch, TrainTarget, backward_selective, extract, init_model
from .numerics import (
    ParamVector,
    affine_forward,
    center_loss,
    cross_entropy,
    finite_diff_grad,
    kd_loss,
    leaky_relu,
    leaky_relu_grad,
    relative_error,
)

FD_EPS = 1e-5
REL_TOL = 1e-5
# Inputs this close to a LeakyReLU kink make central differences straddle it.
KINK_MARGIN = 1e-3


@dataclass
class OpCheck:
    op: str
    cases: int
    max_rel_err: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= REL_TOL


def _away_from_zero(gen: np.random.Generator, shape) -> np.ndarray:
    x = gen.standard_normal(shape)
    return np.where(np.abs(x) < KINK_MARGIN, KINK_MARGIN * 10 * np.sign(x + 1e-300), x)


def _case_affine(gen):
    b, n, m = (int(v) for v in gen.integers(1, 5, size=3))
    p = ParamVector([("x", gen.standard_normal((b, n))), ("w", gen.standard_normal((n, m))),
                     ("b", gen.standard_normal(m))])
    r = gen.standard_normal((b, m))

    def loss(v):
        return float((r * affine_forward(v["x"], v["w"], v["b"])).sum())

    gx, gw = r @ p["w"].T, p["x"].T @ r
    analytic = ParamVector([("x", gx), ("w", gw), ("b", r.sum(axis=0))])
    return loss, p, analytic


def _case_leaky(gen):
    shape = (int(gen.integers(1, 5)), int(gen.integers(1, 6)))
    slope = float(gen.uniform(0.01, 0.5))
    p = ParamVector([("x", _away_from_zero(gen, shape))])
    r = gen.standard_normal(shape)

    def loss(v):
        return float((r * leaky_relu(v["x"], slope)).sum())

    return loss, p, ParamVector([("x", r * leaky_relu_grad(p["x"], slope))])


def _case_softmax_ce(gen):
    b, c = int(gen.integers(1, 5)), int(gen.integers(2, 7))
    tau = float(gen.uniform(0.5, 4.0))
    labels = gen.integers(0, c, size=b)
    p = ParamVector([("logits", gen.standard_normal((b, c)) * 3)])

    def loss(v):
        return cross_entropy(v["logits"] / tau, labels)[0]

    _, g = cross_entropy(p["logits"] / tau, labels)
    return loss, p, ParamVector([("logits", g / tau)])


def _case_kd(gen):
    b, c = int(gen.integers(1, 5)), int(gen.integers(2, 7))
    tau = float(gen.uniform(0.5, 4.0))
    teacher = gen.standard_normal((b, c)) * 2
    p = ParamVector([("student", gen.standard_normal((b, c)) * 2)])

    def loss(v):
        return kd_loss(teacher, v["student"], tau)[0]

    return loss, p, ParamVector([("student", kd_loss(teacher, p["student"], tau)[1])])


def _case_center(gen):
    b, k = int(gen.integers(1, 6)), int(gen.integers(1, 6))
    classes = int(gen.integers(1, 4))
    labels = gen.integers(0, classes, size=b)
    anchors = {c: gen.standard_normal(k) for c in range(classes)}
    p = ParamVector([("features", gen.standard_normal((b, k)))])

    def loss(v):
        return center_loss(v["features"], labels, anchors)[0]

    return loss, p, ParamVector([("features", center_loss(p["features"], labels, anchors)[1])])


def _model_case(gen, target: TrainTarget):
    while True:
        arch = ModelArch(input_dim=3, num_classes=3, hidden_dims=(4,), feature_dim=3,
                         leaky_slope=float(gen.uniform(0.01, 0.3)))
        model = init_model(arch, int(gen.integers(2**31)))
        # Random nonzero biases so every parameter matters.
        params = model.params().map(lambda a: a + 0.1 * gen.standard_normal(a.shape))
        model = model.with_params(params)
        b = int(gen.integers(1, 5))
        x = gen.standard_normal((b, 3))
        # Reject draws with a pre-activation near a kink.
        h = x
        near_kink = False
        for w, bias in zip(model.extractor.arrays()[::2], model.extractor.arrays()[1::2]):
            z = h @ w + bias
            near_kink |= bool((np.abs(z) < KINK_MARGIN).any())
            h = leaky_relu(z, arch.leaky_slope)
        if not near_kink:
            break
    labels = gen.integers(0, 3, size=b)
    feats = extract(model.extractor, x, arch.leaky_slope)
    anchors = {c: feats.mean(axis=0) + gen.standard_normal(3) for c in range(3)}
    spec = LossSpec(kd_weight=float(gen.uniform(0, 1)), tau=2.0, teacher_logits=gen.standard_normal((b, 3)),
                    center_weight=float(gen.uniform(0, 2)), anchors=anchors)
    if target is TrainTarget.CLASSIFIER:
        spec.center_weight = 0.0
    terms, grads = backward_selective(model, x, labels, spec, target)

    if target is TrainTarget.EXTRACTOR:
        def loss(v):
            return backward_selective(model.replace(extractor=v), x, labels, spec, target)[0].total
        return loss, model.extractor, grads.extractor
    if target is TrainTarget.CLASSIFIER:
        def loss(v):
            return backward_selective(model.replace(classifier=v), x, labels, spec, target)[0].total
        return loss, model.classifier, grads.classifier

    def loss(v):
        return backward_selective(model.with_params(v), x, labels, spec, target)[0].total
    return loss, model.params(), grads.params()


CASES: dict[str, Callable] = {
    "affine": _case_affine,
    "leaky_relu": _case_leaky,
    "softmax_temp+cross_entropy": _case_softmax_ce,
    "kd_loss": _case_kd,
    "center_loss": _case_center,
    "model[both]": lambda g: _model_case(g, TrainTarget.BOTH),
    "model[extractor]": lambda g: _model_case(g, TrainTarget.EXTRACTOR),
    "model[classifier]": lambda g: _model_case(g, TrainTarget.CLASSIFIER),
}


def run_gradcheck(cases: int = 50, seed: int = 0) -> list[OpCheck]:
    out = []
    for k, (name, make) in enumerate(CASES.items()):
        gen = np.random.default_rng([seed, k])
        worst = 0.0
        for _ in range(cases):
            loss, params, analytic = make(gen)
            numeric = finite_diff_grad(loss, params, FD_EPS)
            worst = max(worst, relative_error(analytic.flatten(), numeric.flatten()))
        out.append(OpCheck(name, cases, worst))
    return out


def main(cases: int = 50, seed: int = 0) -> int:
    start = time.perf_counter()
    results = run_gradcheck(cases, seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.op:28s} cases={r.cases} max_rel_err={r.max_rel_err:.2e}")
    print(f"gradcheck finished in {time.perf_counter() - start:.1f}s")
    return 0 if all(r.passed for r in results) else 2
