"""End-to-end acceptance checks on the standard synthetic benchmark.

Each test records one PASS/FAIL line, printed in the terminal summary.
Benchmark runs are cached per session (see conftest.Bench).
"""

import csv
import io
import time

import numpy as np
import pytest

import fedlab.fedcore as fedcore
from fedlab import rng
from fedlab.data import PartitionSpec, gen_synthetic, partition
from fedlab.fedcore import ClientState, Hyperparams
from fedlab.gradcheck import CASES, run_gradcheck
from fedlab.models import ModelArch, init_model
from fedlab.numerics import ParamVector
from fedlab.orchestrator import metrics_csv, run_experiment, weights_delta_csv, write_artifact
from fedlab.server import aggregate_centroid_similarity

from conftest import SEEDS, record_criterion

pytestmark = pytest.mark.slow

ALGORITHMS5 = ("fedecouple", "local", "ftfedavg", "fedprox", "fedrep")


def test_criterion_01_gradient_oracle():
    t0 = time.perf_counter()
    results = run_gradcheck(cases=50, seed=0)
    elapsed = time.perf_counter() - t0
    worst = max(r.max_rel_err for r in results)
    ok = all(r.passed for r in results) and {r.op for r in results} == set(CASES) and elapsed < 30
    record_criterion(1, ok, f"{len(results)} ops x 50 cases, worst rel err {worst:.1e}, {elapsed:.1f}s")
    assert ok


def _random_models(gen, n, dim):
    split = int(gen.integers(1, dim)) if dim > 1 else 1
    return [ParamVector([("a", gen.standard_normal(split)), ("b", gen.standard_normal(dim - split))])
            for _ in range(n)]


def test_criterion_02_aggregation_algebra():
    worst = {"sum": 0.0, "uniform": 0.0, "perm": 0.0, "scale": 0.0}
    for seed in range(100):
        gen = np.random.default_rng(seed)
        n, dim = int(gen.integers(1, 9)), int(gen.integers(2, 257))
        models = _random_models(gen, n, dim)
        sizes = gen.integers(1, 500, size=n).tolist()
        ids = gen.permutation(100)[:n].tolist()
        glob, w = aggregate_centroid_similarity(models, sizes, ids)
        worst["sum"] = max(worst["sum"], abs(sum(w.iota) - 1), abs(sum(w.alpha) - 1))

        _, same = aggregate_centroid_similarity([models[0].copy() for _ in range(n)], sizes, ids)
        worst["uniform"] = max(worst["uniform"], max(abs(i - 1 / n) for i in same.iota))

        perm = gen.permutation(n)
        g2, _ = aggregate_centroid_similarity([models[k] for k in perm], [sizes[k] for k in perm],
                                              [ids[k] for k in perm])
        worst["perm"] = max(worst["perm"], float(np.abs(glob.flatten() - g2.flatten()).max()))

        c = float(gen.uniform(0.01, 100))
        _, scaled = aggregate_centroid_similarity([m.map(lambda a: a * c) for m in models], sizes, ids)
        worst["scale"] = max(worst["scale"], float(np.abs(np.subtract(w.iota, scaled.iota)).max()))
    ok = worst["sum"] <= 1e-10 and all(worst[k] <= 1e-12 for k in ("uniform", "perm", "scale"))
    record_criterion(2, ok, "100 seeds, worst: " + ", ".join(f"{k}={v:.1e}" for k, v in worst.items()))
    assert ok


def _mean_nonzero_classes(ds, part):
    return float(np.mean([np.count_nonzero(part.label_histogram(ds, j)) for j in range(len(part.clients))]))


def test_criterion_03_partitioner_contracts():
    ds = gen_synthetic(10, 8, 2500, 0.5, 0)
    failures = []
    for kind in ("weak_pathological", "pathological", "dirichlet"):
        for seed in range(20):
            spec = PartitionSpec(kind, num_clients=10, samples_per_client=600, s_percent=20, classes_per_client=3,
                                 beta=0.5)
            part = partition(ds, spec, np.random.default_rng(seed))
            allidx = np.concatenate(part.clients)
            if len(np.unique(allidx)) != len(allidx):
                failures.append(f"{kind}/{seed}: overlap")
            for j, (c, tr, te) in enumerate(zip(part.clients, part.train, part.test)):
                if not np.array_equal(np.sort(np.concatenate([tr, te])), np.sort(c)):
                    failures.append(f"{kind}/{seed}: client {j} split accounting")
            if kind in ("pathological", "dirichlet") and len(allidx) != len(ds):
                failures.append(f"{kind}/{seed}: {len(allidx)} of {len(ds)} samples assigned")
            if kind == "weak_pathological":
                for j in range(10):
                    hist = part.label_histogram(ds, j)
                    if hist.sum() != 600 or hist.min() < 12 or sorted(hist)[:8] != [12] * 8:
                        failures.append(f"{kind}/{seed}: client {j} histogram {hist.tolist()}")
    mono = []
    for seed in range(3):
        dsh = gen_synthetic(10, 4, 200, 0.5, seed)
        lo = _mean_nonzero_classes(dsh, partition(dsh, PartitionSpec("dirichlet", 20, beta=0.1),
                                                  np.random.default_rng(seed)))
        hi = _mean_nonzero_classes(dsh, partition(dsh, PartitionSpec("dirichlet", 20, beta=10.0),
                                                  np.random.default_rng(seed)))
        mono.append((lo, hi))
        if not lo < hi:
            failures.append(f"dirichlet monotonicity seed {seed}: {lo} vs {hi}")
    ok = not failures
    detail = "3 schemes x 20 seeds; nonzero classes beta=0.1 vs 10: " + ", ".join(f"{a:.1f}<{b:.1f}" for a, b in mono)
    record_criterion(3, ok, detail if ok else "; ".join(failures[:5]))
    assert ok, failures


def test_criterion_04_selective_update(monkeypatch):
    """Instrument one full FedeCouple round and inspect what each phase touches."""
    ds = gen_synthetic(5, 10, 40, 0.5, 3)
    arch = ModelArch(10, 5, (16,), 12)
    part = partition(ds, PartitionSpec("pathological", 2, classes_per_client=3), np.random.default_rng(0))
    client = ClientState(0, part.train[0], part.test[0], init_model(arch, 7))
    glob = init_model(arch, 8)
    hp = Hyperparams(e_cl=2, e_fe=2, batch_size=16, da=False)

    events = []
    real_extract, real_classify = fedcore.extract, fedcore.classify
    real_head, real_backward = fedcore.head_loss_and_grad, fedcore.backward_selective

    def snap(v):
        return v.copy()

    def extract(theta, x, slope=0.01):
        events.append(("extract", snap(theta)))
        return real_extract(theta, x, slope)

    def classify(phi, h):
        events.append(("teacher", snap(phi)))
        return real_classify(phi, h)

    def head(phi, h, labels, spec):
        events.append(("head_kd" if spec.kd_weight else "head_ce", snap(phi)))
        return real_head(phi, h, labels, spec)

    def backward(model, x, labels, spec, target):
        events.append(("body", snap(model.classifier)))
        return real_backward(model, x, labels, spec, target)

    monkeypatch.setattr(fedcore, "extract", extract)
    monkeypatch.setattr(fedcore, "classify", classify)
    monkeypatch.setattr(fedcore, "head_loss_and_grad", head)
    monkeypatch.setattr(fedcore, "backward_selective", backward)
    res = fedcore.fedecouple_local_round(client, ds, glob, hp, rng.stream(0, "batch", 0, 0))

    first_body = next(i for i, e in enumerate(events) if e[0] == "body")
    last_head = max(i for i, e in enumerate(events) if e[0].startswith("head"))
    # Anything in between is the anchor computation on the global extractor.
    head_part, body_part = events[:last_head + 1], events[first_body:]
    # Classifier phase: every feature extraction uses the untouched previous extractor.
    theta_ok = all(v.bitwise_equal(client.model.extractor) for k, v in head_part if k == "extract")
    # Teacher logits come from phi_gi, and the following CE step on phi_gi sees it unchanged.
    teacher_ok = True
    for i, (k, v) in enumerate(head_part):
        if k == "teacher":
            nxt = next(e for e in head_part[i + 1:] if e[0] == "head_ce")
            teacher_ok &= nxt[1].bitwise_equal(v)
    # Extractor phase: the head seen by each step is constant within its sub-phase,
    # and the final personalized head is the one the classifier phase produced.
    b = len(body_part) // (1 + hp.e_fe)
    frozen, local = body_part[:b], body_part[b:]
    phi_ok = all(v.bitwise_equal(glob.classifier) for _, v in frozen)
    phi_ok &= all(v.bitwise_equal(res.model.classifier) for _, v in local)
    n_teacher = sum(k == "teacher" for k, _ in head_part)
    ok = theta_ok and teacher_ok and phi_ok and n_teacher > 0
    record_criterion(4, ok, f"theta frozen in head phase={theta_ok}, phi frozen in body phase={phi_ok}, "
                            f"teacher intact across {n_teacher} KD steps={teacher_ok}")
    assert ok


def test_criterion_05_descent(bench):
    verdicts = {s: bench.run(s).verdict for s in SEEDS}
    passed = sum(v.ok for v in verdicts.values())
    t50 = bench.wall[(1, "fedecouple", ())]
    ok = passed >= 2
    record_criterion(5, ok, f"descent ok in {passed}/3 seeds "
                            f"({', '.join(f'seed {s}: {v}' for s, v in verdicts.items())})")
    assert ok
    assert t50 < 300, f"50 rounds took {t50:.0f}s"


def test_criterion_06_anchor_distance(bench):
    pairs = {s: (bench.run(s).reports[-1].anchor_dist, bench.run(s, gfa=False).reports[-1].anchor_dist)
             for s in SEEDS}
    wins = sum(on < off for on, off in pairs.values())
    ok = wins >= 2
    record_criterion(6, ok, f"mu=2 closer in {wins}/3 seeds: "
                            + ", ".join(f"{on:.3f} vs {off:.3f}" for on, off in pairs.values()))
    assert ok


def test_criterion_07_directional(bench):
    final = {s: {a: bench.run(s, a).reports[-1].mean_acc for a in ALGORITHMS5} for s in SEEDS}
    total = sum(bench.wall[(s, a, ())] for s in SEEDS for a in ALGORITHMS5)
    wins = sum(f["fedecouple"] >= f["local"] and f["fedecouple"] >= f["ftfedavg"] for f in final.values())
    ok = wins >= 2 and total < 25 * 60
    detail = f"wins {wins}/3, 5-algorithm comparison {total / 60:.1f} min; " + "; ".join(
        f"seed {s}: fedecouple {f['fedecouple']:.4f} local {f['local']:.4f} ftfedavg {f['ftfedavg']:.4f}"
        for s, f in final.items())
    record_criterion(7, ok, detail)
    assert ok, detail


def test_criterion_08_weight_delta(bench):
    stats = {}
    for s in SEEDS:
        deltas = bench.run(s).deltas
        stats[s] = (deltas.max_abs(10, 50), deltas.max_abs(2, 5))
    ok = all(late < 0.05 and late < early for late, early in stats.values())
    record_criterion(8, ok, "max|d iota| rounds 10-50 vs 2-5: "
                            + ", ".join(f"{a:.1e} < {b:.1e}" for a, b in stats.values()))
    assert ok


def _metrics(path):
    return list(csv.DictReader(io.StringIO(path.read_text())))


def test_criterion_09_ablation_plumbing(bench, tmp_path):
    variants = {"all_on": {}, "gfa_off": {"gfa": False}, "glf_off": {"glf": False},
                "gpc_off": {"gpc": False}, "da_off": {"da": False}}
    rows = {}
    for name, kw in variants.items():
        cfg = bench.config(1, **kw)
        cfg.rounds = 2
        write_artifact(run_experiment(cfg), tmp_path / name)
        rows[name] = _metrics(tmp_path / name / "metrics.csv")
    problems = []
    for name, kw in variants.items():
        kd = [float(r["kd"]) for r in rows[name]]
        center = [float(r["center"]) for r in rows[name]]
        nrows = {int(r["rows"]) for r in rows[name]}
        if (all(v == 0 for v in kd)) != (kw.get("gpc") is False):
            problems.append(f"{name}: kd={kd}")
        if (all(v == 0 for v in center)) != (kw.get("gfa") is False):
            problems.append(f"{name}: center={center}")
        expected = 32 if kw.get("da") is False else 64
        if nrows != {expected}:
            problems.append(f"{name}: rows={nrows}")
    traces = {name: tuple((r["ce"], r["kd"], r["center"], r["rows"]) for r in rows[name]) for name in variants}
    if len(set(traces[n] for n in variants if n != "all_on")) != 4:
        problems.append("toggle traces are not pairwise distinct")
    ok = not problems
    record_criterion(9, ok, "kd==0 iff gpc off, center==0 iff gfa off, rows 64 iff da on; 4 distinct traces"
                     if ok else "; ".join(problems))
    assert ok, problems


def test_criterion_10_reproducibility(bench, tmp_path):
    cfg = bench.config(1)
    reference = bench.run(1)
    second = run_experiment(cfg, workers=0)
    parallel = run_experiment(cfg, workers=4)
    for name, art in (("a", reference), ("b", second), ("c", parallel)):
        write_artifact(art, tmp_path / name)
    files = ("metrics.csv", "weights_delta.csv")
    same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
            == (tmp_path / "c" / f).read_bytes() for f in files}
    ok = all(same.values()) and metrics_csv(reference) == metrics_csv(parallel) \
        and weights_delta_csv(reference) == weights_delta_csv(parallel)
    record_criterion(10, ok, "sequential x2 and 4-worker runs byte-identical: "
                     + ", ".join(f"{f}={v}" for f, v in same.items()))
    assert ok
