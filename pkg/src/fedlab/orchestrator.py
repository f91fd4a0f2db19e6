"""Experiment driver: the round loop, reports, persistence and summaries."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import rng
from .config import ExperimentConfig, config_from_dict
from .data import Dataset, gen_synthetic, load_idx, partition
from .errors import ConfigError, FedlabError
from .fedcore import ClientState, anchor_distance, compute_anchors, evaluate, local_round
from .models import DecoupledModel, ModelArch, init_model, save_model
from .server import (
    AggregationWeights,
    WeightDeltaLog,
    default_scheme,
    dispatch_update,
    record_weight_delta,
    sample_clients,
)

log = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "round", "mean_acc", "std_acc", "pre_mean_acc", "mean_loss",
    "ce", "kd", "center", "rows", "anchor_dist", "fallback",
)
DESCENT_WINDOW = 5
DESCENT_SLACK = 1e-3


@dataclass
class RoundReport:
    round: int
    mean_acc: float
    std_acc: float
    pre_mean_acc: float
    mean_loss: float
    ce: float
    kd: float
    center: float
    rows: int
    anchor_dist: float
    participants: list[int]
    client_acc: list[float]
    client_pre_acc: list[float]
    client_loss: list[float]
    iota: list[float] = field(default_factory=list)
    fallback: bool = False
    wall_time: float = 0.0


@dataclass
class DescentVerdict:
    ok: bool
    violations: list[int] = field(default_factory=list)

    def __str__(self) -> str:
        return "ok" if self.ok else f"violated({self.violations})"


@dataclass
class RunArtifact:
    config: dict
    reports: list[RoundReport]
    deltas: WeightDeltaLog
    verdict: Optional[DescentVerdict] = None
    models: Optional[list[DecoupledModel]] = None
    global_model: Optional[DecoupledModel] = None

    def metric_series(self, name: str) -> list[float]:
        return [getattr(r, name) for r in self.reports]


# ---------------------------------------------------------------------------
# setup
# ---------------------------------------------------------------------------

def build_dataset(cfg: ExperimentConfig) -> Dataset:
    d = cfg.data
    if d.source == "idx":
        return load_idx(d.images, d.labels)
    return gen_synthetic(d.classes, d.dim, d.per_class, d.spread, rng.stream(cfg.seed, "data"))


def build_arch(cfg: ExperimentConfig, ds: Dataset) -> ModelArch:
    m = cfg.model
    return ModelArch(ds.dim, ds.num_classes, tuple(m.hidden_dims), m.feature_dim, m.leaky_slope)


def _worker_count(workers: Optional[int]) -> int:
    if workers is not None:
        return max(0, int(workers))
    raw = os.environ.get("FEDLAB_THREADS", "0")
    try:
        return max(0, int(raw))
    except ValueError:
        raise ConfigError(f"FEDLAB_THREADS must be an integer, got {raw!r}") from None


# ---------------------------------------------------------------------------
# the round loop
# ---------------------------------------------------------------------------

def run_experiment(cfg: ExperimentConfig, workers: Optional[int] = None, keep_models: bool = False) -> RunArtifact:
    """Run ``cfg.rounds`` rounds and collect per-round reports.

    ``workers`` (default: ``FEDLAB_THREADS``, 0 = sequential) bounds the
    number of clients trained concurrently; results do not depend on it.
    """
    ds = build_dataset(cfg)
    spec = cfg.partition.spec(cfg.num_clients, cfg.seed)
    part = partition(ds, spec, rng.stream(cfg.seed, "partition"))
    arch = build_arch(cfg, ds)
    global_model = init_model(arch, cfg.seed)
    clients = [ClientState(i, part.train[i], part.test[i], global_model) for i in range(cfg.num_clients)]
    kind = cfg.algorithm
    scheme = default_scheme(kind) if cfg.scheme == "auto" else cfg.scheme
    hp = cfg.hyper
    slope = arch.leaky_slope
    n_workers = _worker_count(workers)
    pool = ThreadPoolExecutor(max_workers=n_workers) if n_workers > 0 else None

    reports: list[RoundReport] = []
    deltas = WeightDeltaLog()
    prev_weights: Optional[AggregationWeights] = None
    try:
        for t in range(cfg.rounds):
            rnd = t + 1
            started = time.perf_counter()
            participants = sample_clients(cfg.num_clients, cfg.rho, rng.stream(cfg.seed, "sample", t))
            snapshot = global_model

            def train(cid: int):
                c = clients[cid]
                return local_round(
                    kind, c, ds, snapshot, hp,
                    rng.stream(cfg.seed, "batch", cid, t),
                    rng.stream(cfg.seed, "augment", cid, t),
                )

            pre_acc = [evaluate(clients[c].model, ds, clients[c].test) for c in participants]
            try:
                if pool is None:
                    results = [train(c) for c in participants]
                else:
                    results = list(pool.map(train, participants))
            except FedlabError as exc:
                raise type(exc)(f"round {rnd}: {exc}") from exc

            post_acc, losses, dists, terms = [], [], [], []
            for res in results:
                c = clients[res.cid]
                personal = res.personalized
                post_acc.append(evaluate(personal, ds, c.test))
                anchors = compute_anchors(snapshot.extractor, ds, c.train, slope)
                dists.append(anchor_distance(personal.extractor, anchors, ds, c.test, slope))
                tm = res.term_means()
                terms.append(tm)
                losses.append(tm["loss"])
                c.model = res.model

            weights = None
            if kind != "local":
                global_model, weights = dispatch_update(scheme, kind, results, global_model)
                weights.round = rnd
                record_weight_delta(deltas, prev_weights, weights)
                prev_weights = weights

            reports.append(RoundReport(
                round=rnd,
                mean_acc=float(np.mean(post_acc)),
                std_acc=float(np.std(post_acc)),
                pre_mean_acc=float(np.mean(pre_acc)),
                mean_loss=float(np.mean(losses)),
                ce=float(np.mean([m["ce"] for m in terms])),
                kd=float(np.mean([m["kd"] for m in terms])),
                center=float(np.mean([m["center"] for m in terms])),
                rows=int(max(m["rows"] for m in terms)),
                anchor_dist=float(np.nanmean(dists)) if not np.all(np.isnan(dists)) else float("nan"),
                participants=list(participants),
                client_acc=post_acc,
                client_pre_acc=pre_acc,
                client_loss=losses,
                iota=list(weights.iota) if weights else [],
                fallback=bool(weights.fallback) if weights else False,
                wall_time=time.perf_counter() - started,
            ))
            log.info("round %d/%d acc=%.4f loss=%.4f", rnd, cfg.rounds, reports[-1].mean_acc, reports[-1].mean_loss)
    finally:
        if pool is not None:
            pool.shutdown()

    artifact = RunArtifact(cfg.to_dict(), reports, deltas)
    if len(reports) >= DESCENT_WINDOW:
        artifact.verdict = descent_monitor(artifact)
    if keep_models or cfg.save_models:
        artifact.models = [c.model for c in clients]
        artifact.global_model = global_model
    return artifact


# ---------------------------------------------------------------------------
# monitors and summaries
# ---------------------------------------------------------------------------

def descent_monitor(source: RunArtifact | Sequence[float], window: int = DESCENT_WINDOW,
                    slack: float = DESCENT_SLACK) -> DescentVerdict:
    """Check that the moving average of the mean training loss never rises.

    Rounds are 1-based; the first average is available at round ``window``
    and a round ``r > window`` violates if its average exceeds the previous
    one by more than ``slack``.
    """
    losses = source.metric_series("mean_loss") if isinstance(source, RunArtifact) else list(source)
    if len(losses) < window:
        raise FedlabError(f"descent monitor needs >= {window} rounds, got {len(losses)}")
    ma = np.convolve(np.asarray(losses, dtype=np.float64), np.ones(window) / window, mode="valid")
    bad = [i + window for i in range(1, len(ma)) if ma[i] > ma[i - 1] + slack]
    return DescentVerdict(not bad, bad)


SUMMARY_METRICS = ("mean_acc", "std_acc", "pre_mean_acc", "mean_loss", "anchor_dist")


def _comparable(config: dict) -> dict:
    c = json.loads(json.dumps(config))
    for key in ("seed", "out_dir", "save_models"):
        c.pop(key, None)
    return c


def summarize(artifacts: Sequence[RunArtifact]) -> dict[str, dict[str, float]]:
    """Final-round metrics across seeds: mean, population std, min, max."""
    if not artifacts:
        raise FedlabError("summarize needs at least one artifact")
    ref = _comparable(artifacts[0].config)
    for a in artifacts[1:]:
        if _comparable(a.config) != ref:
            raise ConfigError("cannot summarize runs whose configs differ beyond the seed")
    table = {}
    for name in SUMMARY_METRICS:
        vals = [float(getattr(a.reports[-1], name)) for a in artifacts]
        table[name] = {
            "mean": statistics.fmean(vals),
            "std": statistics.pstdev(vals),
            "min": min(vals),
            "max": max(vals),
            "n": len(vals),
        }
    return table


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def metrics_csv(artifact: RunArtifact) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in artifact.reports:
        w.writerow([_fmt(getattr(r, col)) for col in METRIC_COLUMNS])
    return buf.getvalue()


def weights_delta_csv(artifact: RunArtifact) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("round", "client", "delta"))
    for rnd, cid, d in artifact.deltas.rows:
        w.writerow((rnd, cid, _fmt(d)))
    return buf.getvalue()


def artifact_to_json(artifact: RunArtifact) -> dict:
    return {
        "config": artifact.config,
        "reports": [asdict(r) for r in artifact.reports],
        "weight_delta_gaps": artifact.deltas.gaps,
        "descent": None if artifact.verdict is None else asdict(artifact.verdict),
    }


def artifact_from_json(doc: dict) -> RunArtifact:
    reports = [RoundReport(**r) for r in doc["reports"]]
    verdict = None if doc.get("descent") is None else DescentVerdict(**doc["descent"])
    return RunArtifact(doc["config"], reports, WeightDeltaLog(gaps=list(doc.get("weight_delta_gaps", []))), verdict)


def write_artifact(artifact: RunArtifact, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(metrics_csv(artifact))
    (out / "weights_delta.csv").write_text(weights_delta_csv(artifact))
    (out / "run.json").write_text(json.dumps(artifact_to_json(artifact), indent=1))
    if artifact.models is not None:
        mdir = out / "models"
        mdir.mkdir(exist_ok=True)
        for i, m in enumerate(artifact.models):
            save_model(m, mdir / f"client{i:03d}.json")
        if artifact.global_model is not None:
            save_model(artifact.global_model, mdir / "global.json")
    return out


def load_artifact(run_dir: str | Path) -> RunArtifact:
    path = Path(run_dir) / "run.json"
    if not path.is_file():
        raise ConfigError(f"no run.json in {run_dir}")
    return artifact_from_json(json.loads(path.read_text()))


def replay_config(artifact: RunArtifact) -> ExperimentConfig:
    return config_from_dict(artifact.config)
