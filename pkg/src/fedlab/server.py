"""Client sampling, aggregation schemes and aggregation-weight tracking."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DegenerateVectorError, LayoutError
from .fedcore import LocalRoundResult
from .models import DecoupledModel
from .numerics import ParamVector, cosine_similarity, weighted_sum

SIMILARITY_FLOOR = 1e-6
SCHEMES = ("size_weighted", "centroid_similarity")


def sample_clients(n: int, rho: float | tuple[float, float], gen: np.random.Generator) -> list[int]:
    """``ceil(rho*n)`` distinct client ids, sorted.

    ``rho`` may be a ``(lo, hi)`` range, in which case it is drawn uniformly
    from that range first.
    """
    if isinstance(rho, (tuple, list)):
        lo, hi = rho
        if not 0 < lo <= hi <= 1:
            raise ConfigError(f"participation range must satisfy 0 < lo <= hi <= 1, got {rho}")
        rho = float(gen.uniform(lo, hi))
    if not 0 < rho <= 1:
        raise ConfigError(f"participation ratio must lie in (0, 1], got {rho}")
    # Guard against 0.7*10 == 7.000000000000001.
    k = max(1, math.ceil(rho * n - 1e-9))
    if k >= n:
        return list(range(n))
    return sorted(int(i) for i in gen.choice(n, size=k, replace=False))


def _ordered(models: Sequence[ParamVector], sizes: Sequence[float], ids: Optional[Sequence[int]]):
    if not models:
        raise LayoutError("aggregation needs at least one model")
    if len(models) != len(sizes):
        raise LayoutError(f"{len(models)} models but {len(sizes)} sizes")
    ids = list(range(len(models))) if ids is None else [int(i) for i in ids]
    if len(set(ids)) != len(ids) or len(ids) != len(models):
        raise LayoutError("client ids must be distinct, one per model")
    order = sorted(range(len(models)), key=lambda k: ids[k])
    for m in models[1:]:
        models[0].check_layout(m)
    return order, ids


def _size_weights(sizes: Sequence[float]) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=np.float64)
    if (sizes < 0).any():
        raise ConfigError("client sizes must be nonnegative")
    total = sizes.sum()
    if total <= 0:
        raise ConfigError("total client size must be > 0")
    return sizes / total


def aggregate_size_weighted(models: Sequence[ParamVector], sizes: Sequence[float],
                            ids: Optional[Sequence[int]] = None) -> ParamVector:
    order, _ = _ordered(models, sizes, ids)
    alpha = _size_weights(sizes)
    return weighted_sum([models[k] for k in order], [alpha[k] for k in order])


@dataclass
class AggregationWeights:
    client_ids: list[int]
    alpha: list[float]
    iota: list[float]
    round: int = 0
    fallback: bool = False
    raw_similarity: list[float] = field(default_factory=list)


def _similarity(a: ParamVector, b: ParamVector) -> float:
    # A zero vector has no direction; score it as orthogonal. Since the
    # alpha-weighted similarities sum to |avg| > 0, every raw similarity can
    # only be <= 0 when the average itself vanishes.
    try:
        return cosine_similarity(a, b)
    except DegenerateVectorError:
        return 0.0


def aggregate_centroid_similarity(
    models: Sequence[ParamVector],
    sizes: Sequence[float],
    ids: Optional[Sequence[int]] = None,
    floor: float = SIMILARITY_FLOOR,
) -> tuple[ParamVector, AggregationWeights]:
    """Weight each model by its cosine similarity to the size-weighted mean.

    Similarities are clamped to ``[floor, 1]``; if none is positive the size
    weights are used instead and ``fallback`` is set.
    """
    order, ids = _ordered(models, sizes, ids)
    alpha = _size_weights(sizes)
    avg = weighted_sum([models[k] for k in order], [alpha[k] for k in order])
    raw = np.array([_similarity(m, avg) for m in models])
    if (raw <= 0).all():
        iota = alpha.copy()
        fallback = True
    else:
        s = np.clip(raw, floor, 1.0)
        # Sum in client-id order so the weights do not depend on call order.
        iota = s / math.fsum(s[order])
        fallback = False
    glob = weighted_sum([models[k] for k in order], [iota[k] for k in order])
    weights = AggregationWeights(ids, alpha.tolist(), iota.tolist(), fallback=fallback,
                                 raw_similarity=raw.tolist())
    return glob, weights


@dataclass
class WeightDeltaLog:
    """``iota^t - iota^(t-1)`` per client for consecutive rounds."""

    rows: list[tuple[int, int, float]] = field(default_factory=list)
    gaps: list[int] = field(default_factory=list)

    def deltas_for(self, round_: int) -> list[float]:
        return [d for r, _, d in self.rows if r == round_]

    def max_abs(self, first: int, last: int) -> float:
        vals = [abs(d) for r, _, d in self.rows if first <= r <= last]
        return max(vals) if vals else 0.0


def record_weight_delta(log: WeightDeltaLog, prev: Optional[AggregationWeights],
                        curr: AggregationWeights) -> WeightDeltaLog:
    if prev is None:
        return log
    if prev.client_ids != curr.client_ids:
        log.gaps.append(curr.round)
        return log
    for cid, a, b in zip(curr.client_ids, prev.iota, curr.iota):
        log.rows.append((curr.round, cid, b - a))
    return log


def default_scheme(kind: str) -> str:
    return "centroid_similarity" if kind == "fedecouple" else "size_weighted"


def dispatch_update(
    scheme: str,
    kind: str,
    results: Sequence[LocalRoundResult],
    global_model: DecoupledModel,
) -> tuple[DecoupledModel, AggregationWeights]:
    """New global model from the round's uploads.

    FedRep uploads only the extractor; the global classifier is carried over.
    """
    if scheme not in SCHEMES:
        raise ConfigError(f"unknown aggregation scheme {scheme!r}")
    if not results:
        raise LayoutError("dispatch_update needs at least one client result")
    uploads = [r.upload for r in results]
    sizes = [r.num_samples for r in results]
    ids = [r.cid for r in results]
    if scheme == "centroid_similarity":
        agg, weights = aggregate_centroid_similarity(uploads, sizes, ids)
    else:
        agg = aggregate_size_weighted(uploads, sizes, ids)
        alpha = _size_weights(sizes).tolist()
        weights = AggregationWeights(ids, alpha, list(alpha))
    if kind == "fedrep":
        global_model.extractor.check_layout(agg)
        return global_model.replace(extractor=agg), weights
    return global_model.with_params(agg), weights
