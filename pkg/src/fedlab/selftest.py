"""Fast in-package invariant checks, one line per check (``fedlab selftest``)."""

from __future__ import annotations

import numpy as np

from . import rng
from .data import PartitionSpec, gen_synthetic, partition
from .fedcore import ClientState, Hyperparams, fedecouple_local_round
from .models import ModelArch, forward, init_model
from .numerics import ParamVector, cosine_similarity, kd_loss, softmax_temp
from .orchestrator import descent_monitor
from .server import aggregate_centroid_similarity, aggregate_size_weighted


def _check_flatten(gen):
    v = ParamVector([("a", gen.standard_normal((3, 2))), ("b", gen.standard_normal(4))])
    return v.unflatten(v.flatten()).bitwise_equal(v)


def _check_softmax(gen):
    z = gen.standard_normal((5, 7)) * 10
    p = softmax_temp(z, 2.0)
    shifted = softmax_temp(z + 3.5, 2.0)
    return np.allclose(p.sum(axis=1), 1, atol=1e-12, rtol=0) and np.abs(p - shifted).max() <= 1e-12


def _check_kd(gen):
    t, s = gen.standard_normal((4, 5)), gen.standard_normal((4, 5))
    return kd_loss(t, s, 2.0)[0] >= 0 and kd_loss(t, t, 2.0)[0] == 0


def _check_cosine(gen):
    a, b = gen.standard_normal(20), gen.standard_normal(20)
    return abs(cosine_similarity(3.7 * a, b) - cosine_similarity(a, b)) <= 1e-12


def _check_partitions(gen):
    ds = gen_synthetic(10, 4, 400, 0.5, gen)
    for kind in ("weak_pathological", "pathological", "dirichlet"):
        spec = PartitionSpec(kind, num_clients=5, samples_per_client=200, beta=0.5)
        part = partition(ds, spec, np.random.default_rng(1))
        allidx = np.concatenate(part.clients)
        if len(np.unique(allidx)) != len(allidx):
            return False
        for c, tr, te in zip(part.clients, part.train, part.test):
            if not np.array_equal(np.sort(np.concatenate([tr, te])), c):
                return False
    return True


def _check_aggregation(gen):
    models = [ParamVector([("w", gen.standard_normal(10))]) for _ in range(4)]
    sizes = [3, 1, 4, 2]
    glob, w = aggregate_centroid_similarity(models, sizes)
    same, w_same = aggregate_centroid_similarity([models[0]] * 4, sizes)
    ok = abs(sum(w.iota) - 1) <= 1e-10 and all(abs(i - 0.25) <= 1e-12 for i in w_same.iota)
    return ok and aggregate_size_weighted(models[:1], [5]).bitwise_equal(models[0])


def _check_selective(gen):
    ds = gen_synthetic(3, 4, 20, 0.5, gen)
    arch = ModelArch(4, 3, (6,), 5)
    glob = init_model(arch, 1)
    client = ClientState(0, np.arange(0, 60, 2), np.arange(1, 60, 2), init_model(arch, 2))
    hp = Hyperparams(eta=0.0, e_cl=1, e_fe=1, batch_size=8, da=False)
    res = fedecouple_local_round(client, ds, glob, hp, rng.stream(0, "batch", 0, 0))
    # Zero learning rate: classifier untouched, extractor reset to the global one.
    return res.model.classifier.bitwise_equal(client.model.classifier) and res.model.extractor.bitwise_equal(
        glob.extractor
    )


def _check_forward(gen):
    m = init_model(ModelArch(4, 3, (5,), 6), 3)
    x = gen.standard_normal((6, 4))
    perm = gen.permutation(6)
    return np.array_equal(forward(m, x)[perm], forward(m, x[perm]))


def _check_descent(gen):
    ok = descent_monitor(list(np.linspace(2, 1, 20))).ok
    spike = list(np.linspace(2, 1, 20))
    spike[9] += 0.5
    return ok and descent_monitor(spike).violations[:1] == [10]


CHECKS = {
    "numerics.flatten_roundtrip": _check_flatten,
    "numerics.softmax_rows_and_shift": _check_softmax,
    "numerics.kd_nonnegative": _check_kd,
    "numerics.cosine_scale_invariance": _check_cosine,
    "models.forward_permutation": _check_forward,
    "data.partition_disjoint_and_split": _check_partitions,
    "server.aggregation_weights": _check_aggregation,
    "fedcore.zero_step_round": _check_selective,
    "orchestrator.descent_monitor": _check_descent,
}


def run_selftest(seed: int = 0) -> dict[str, bool]:
    results = {}
    for k, (name, fn) in enumerate(CHECKS.items()):
        try:
            results[name] = bool(fn(np.random.default_rng([seed, k])))
        except Exception as exc:  # noqa: BLE001 - report, do not abort the suite
            print(f"{name}: raised {exc!r}")
            results[name] = False
    return results


def main(seed: int = 0) -> int:
    results = run_selftest(seed)
    for name, ok in results.items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    return 0 if all(results.values()) else 2
