"""Acceptance suite: one test per criterion, each reporting a pass line.

Runtime targets in the criteria refer to a typical 8-core desktop; the fuzz
and search tests shard across the cores this machine actually has and report
measured wall time alongside the single-core rate.
"""

import hashlib
import json
import multiprocessing
import os
import random
import time

import numpy as np
import pytest

import conftest
from conftest import (
    REFERENCE_DESCRIPTOR,
    chain_genome,
    chest_like_image,
    fd_gradient,
    max_rel_error,
)
from evocnn import imgpipe
from evocnn.cli import main
from evocnn.compile import accuracy as net_accuracy
from evocnn.compile import compile_genome, param_count, train
from evocnn.evalstats import ContingencyTable, stats
from evocnn.evolution import (
    EvolutionConfig,
    Population,
    Species,
    cull_species,
    remove_stale_species,
    remove_weak_species,
    run_neat,
)
from evocnn.genome import (
    Conv,
    FullyConnected,
    GaussianFanAvg,
    MODE_MAX,
    Pool,
    ReLU,
    deserialize,
    is_valid,
    minimal_genome,
    serialize,
)
from evocnn.gradcam import gradcam
from evocnn.mutation import MutationRates, mutate
from evocnn.nnet import (
    LayerState,
    SolverConfig,
    avgpool_backward,
    avgpool_forward,
    conv2d_backward,
    conv2d_forward,
    fc_backward,
    fc_forward,
    load_checkpoint,
    maxpool_backward,
    maxpool_forward,
    relu_backward,
    relu_forward,
    save_checkpoint,
    softmax_cross_entropy,
)
from evocnn.synth import make_planted_square_dataset, planted_square_image, quadrant_of

GRAD_TOL = 1e-4
FUZZ_CHAINS = 100_000
CHAIN_LENGTH = 20
DATASET_SEED = 20240501  # documented seed of the desk-scale synthetic dataset

SEARCH_CONFIG = {
    "seed": 3,
    "evolution": {"population_size": 20, "max_generations": 8, "target_fitness": 1.0},
    "ranges": {"conv_kernels": [1, 3, 5], "conv_strides": [1, 2],
               "conv_paddings": [0, 1, 2], "conv_filters": [8, 16, 32],
               "pool_kernels": [2, 3], "pool_strides": [2, 3],
               "fc_units": [16, 32, 64]},
}


def record(line: str) -> None:
    conftest.ACCEPTANCE_RESULTS.append(line)
    print(line)


def jobs_available() -> int:
    return max(1, min(8, os.cpu_count() or 1))


# ---------------------------------------------------------------------------
# Criterion 1: contingency-table reproduction


def test_criterion_1_reference_table_reproduction():
    t0 = time.time()
    s = stats(ContingencyTable(tp=806, fp=1, fn=49, tn=896))
    expected_percent = {
        "accuracy": 97.15,
        "prevalence": 48.80,
        "true_positive_rate": 94.27,
        "false_negative_rate": 5.73,
        "false_positive_rate": 0.11,
        "true_negative_rate": 99.89,
        "positive_predictive_value": 99.88,
        "negative_predictive_value": 94.81,
        "false_discovery_rate": 0.12,
        "false_omission_rate": 5.19,
    }
    for field, want in expected_percent.items():
        got = s.as_dict()[field] * 100.0
        assert abs(got - want) <= 0.005, f"{field}: {got} vs {want}"
    assert 843.0 <= s.positive_likelihood_ratio <= 848.0
    assert 14_600.0 <= s.diagnostic_odds_ratio <= 14_800.0
    record(f"CRITERION 1 PASS: all 10 ratios within 0.005pp, "
           f"PLR {s.positive_likelihood_ratio:.1f}, DOR {s.diagnostic_odds_ratio:.0f} "
           f"({time.time() - t0:.3f}s)")


# ---------------------------------------------------------------------------
# Criterion 2: gradient correctness, 100 random configs per layer kind


def _check_conv(rng):
    n, c, f = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    k = int(rng.integers(1, 4))
    s = int(rng.integers(1, 3))
    p = int(rng.integers(0, 2))
    side = int(rng.integers(max(k - 2 * p, 2), 8))
    if (side + 2 * p - k) // s + 1 < 1:
        side = k + 2
    x = rng.normal(size=(n, c, side, side))
    st = LayerState.zeros_like(rng.normal(size=(f, c, k, k)) * 0.5, rng.normal(size=(f,)))
    dy = rng.normal(size=conv2d_forward(x, st, k, s, p).shape)

    def loss():
        return float((conv2d_forward(x, st, k, s, p) * dy).sum())

    dx, dw, db = conv2d_backward(x, st, dy, k, s, p)
    return max(max_rel_error(dx, fd_gradient(loss, x)),
               max_rel_error(dw, fd_gradient(loss, st.weights)),
               max_rel_error(db, fd_gradient(loss, st.bias)))


def _check_pool(rng, forward, backward):
    n, c = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    k = int(rng.integers(2, 4))
    s = int(rng.integers(1, 4))
    side = int(rng.integers(k, 8))
    # integer permutation scaled: window gaps are >= 0.5 >> the fd step
    x = rng.permutation(np.arange(n * c * side * side, dtype=np.float64))
    x = (x * 0.5).reshape(n, c, side, side)
    dy = rng.normal(size=forward(x, k, s).shape)

    def loss():
        return float((forward(x, k, s) * dy).sum())

    return max_rel_error(backward(x, dy, k, s), fd_gradient(loss, x))


def _check_relu(rng):
    n, d = int(rng.integers(1, 4)), int(rng.integers(2, 30))
    signs = rng.choice([-1.0, 1.0], size=(n, d))
    x = signs * rng.uniform(0.1, 1.0, size=(n, d))  # bounded away from 0
    dy = rng.normal(size=(n, d))

    def loss():
        return float((relu_forward(x) * dy).sum())

    return max_rel_error(relu_backward(x, dy), fd_gradient(loss, x))


def _check_fc(rng):
    n, d, u = int(rng.integers(1, 4)), int(rng.integers(1, 10)), int(rng.integers(1, 6))
    x = rng.normal(size=(n, d))
    st = LayerState.zeros_like(rng.normal(size=(d, u)), rng.normal(size=(u,)))
    dy = rng.normal(size=(n, u))

    def loss():
        return float((fc_forward(x, st) * dy).sum())

    dx, dw, db = fc_backward(x, st, dy)
    return max(max_rel_error(dx, fd_gradient(loss, x)),
               max_rel_error(dw, fd_gradient(loss, st.weights)),
               max_rel_error(db, fd_gradient(loss, st.bias)))


def _check_softmax(rng):
    n, k = int(rng.integers(1, 5)), int(rng.integers(2, 6))
    logits = rng.normal(size=(n, k))
    labels = rng.integers(0, k, size=n)

    def loss():
        return softmax_cross_entropy(logits, labels)[0]

    _, dlogits = softmax_cross_entropy(logits, labels)
    return max_rel_error(dlogits, fd_gradient(loss, logits))


def test_criterion_2_gradient_correctness():
    t0 = time.time()
    checks = {
        "conv": _check_conv,
        "maxpool": lambda rng: _check_pool(rng, maxpool_forward, maxpool_backward),
        "avgpool": lambda rng: _check_pool(rng, avgpool_forward, avgpool_backward),
        "relu": _check_relu,
        "fc": _check_fc,
        "softmax-xent": _check_softmax,
    }
    worst = {}
    for name, check in checks.items():
        errors = [check(np.random.Generator(np.random.PCG64(seed)))
                  for seed in range(100)]
        worst[name] = max(errors)
        assert worst[name] < GRAD_TOL, f"{name}: max rel error {worst[name]}"
    summary = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record(f"CRITERION 2 PASS: 100 configs/kind, worst rel errors: {summary} "
           f"({time.time() - t0:.0f}s)")


# ---------------------------------------------------------------------------
# Criterion 3: mutation validity fuzz, 1e5 seeded chains of 20


_FUZZ_SIZES = ((256, 256, 1), (128, 128, 1), (64, 64, 1), (32, 32, 3), (16, 16, 1))
_FUZZ_RATES = MutationRates()


def _fuzz_chunk(args):
    start, count = args
    valid = 0
    for i in range(start, start + count):
        rng = random.Random(i)
        g = minimal_genome(_FUZZ_SIZES[i % len(_FUZZ_SIZES)], 2)
        for _ in range(CHAIN_LENGTH):
            g = mutate(g, _FUZZ_RATES, rng)
        if is_valid(g):
            valid += 1
    return valid


def test_criterion_3_mutation_validity_fuzz():
    t0 = time.time()
    jobs = jobs_available()
    chunk = 1000
    tasks = [(start, chunk) for start in range(0, FUZZ_CHAINS, chunk)]
    if jobs > 1:
        with multiprocessing.Pool(jobs) as pool:
            valid = sum(pool.imap_unordered(_fuzz_chunk, tasks))
    else:
        valid = sum(_fuzz_chunk(t) for t in tasks)
    elapsed = time.time() - t0
    assert valid == FUZZ_CHAINS, f"{FUZZ_CHAINS - valid} chains produced invalid genomes"
    # the 2-minute budget is stated for 8 cores; scale it to this machine
    budget = 120.0 * 8.0 / jobs
    assert elapsed < budget, f"fuzz took {elapsed:.0f}s (budget {budget:.0f}s at {jobs} cores)"
    record(f"CRITERION 3 PASS: {FUZZ_CHAINS} chains x {CHAIN_LENGTH} mutations, "
           f"100% valid, zero crashes ({elapsed:.0f}s on {jobs} cores, "
           f"{elapsed * jobs / FUZZ_CHAINS * 1000:.2f} ms/chain/core)")


# ---------------------------------------------------------------------------
# Criterion 4: Algorithm-1 semantics


def _toy_evaluator(g, seed):
    return 1.0 / (1.0 + abs(len(g.genes) - 8))


def test_criterion_4_algorithm_semantics(tmp_path):
    t0 = time.time()
    # population size invariant + monotone best across a real multi-generation run
    sizes = []
    cfg = EvolutionConfig(population_size=16, max_generations=6, master_seed=13,
                          target_fitness=2.0, input_shape=(32, 32, 1))
    res = run_neat(cfg, _toy_evaluator,
                   on_generation=lambda pop, best: sizes.append(len(pop.members())))
    assert sizes and all(s == 16 for s in sizes)
    best_series = [row.best_fitness for row in res.history]
    assert all(a <= b for a, b in zip(best_series, best_series[1:]))

    # adversarial staleness/weakness: the best genome's species always survives
    base = minimal_genome((16, 16, 1), 2)
    rng = random.Random(99)
    for _ in range(200):
        n_species = rng.randint(1, 5)
        species = []
        for _ in range(n_species):
            members = [base.with_fitness(rng.random())
                       for _ in range(rng.randint(1, 6))]
            species.append(Species(members=members, representative=base,
                                   top_fitness=rng.random(),
                                   staleness=rng.randint(0, 10)))
        pop = Population(species=species, generation=0,
                         size_target=sum(len(s.members) for s in species))
        best_fit = max(m.fitness for s in pop.species for m in s.members)
        out = remove_weak_species(remove_stale_species(cull_species(pop, 0.5), 3))
        survivors = [m.fitness for s in out.species for m in s.members]
        assert survivors and max(survivors) == best_fit

    # fixed-seed bit-reproducibility of run_neat across two runs
    again = run_neat(cfg, _toy_evaluator)
    assert again.best == res.best and again.history == res.history

    # --jobs 1 vs --jobs 8 through the CLI produce identical bytes
    data = make_planted_square_dataset(count=200, size=16, square=5, seed=7)
    data_path = tmp_path / "d.dnds"
    imgpipe.write_dataset(data_path, data.dataset)
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({
        "seed": 5,
        "evolution": {"population_size": 6, "max_generations": 2},
        "ranges": {"conv_kernels": [1, 3], "conv_strides": [1, 2],
                   "conv_paddings": [0, 1], "conv_filters": [4, 8],
                   "pool_kernels": [2], "pool_strides": [2], "fc_units": [16]},
        "solver": {"epochs": 1},
    }))
    outs = {}
    for jobs in (1, 8):
        out = tmp_path / f"jobs{jobs}"
        assert main(["evolve", "--config", str(cfg_path), "--data", str(data_path),
                     "--out", str(out), "--jobs", str(jobs)]) == 0
        outs[jobs] = ((out / "history.csv").read_bytes(),
                      (out / "best_model" / "weights.dndx").read_bytes(),
                      (out / "best_model" / "genome.json").read_bytes())
    assert outs[1] == outs[8]
    record(f"CRITERION 4 PASS: size invariant, monotone best, best-species "
           f"protection (200 adversarial populations), bit-identical runs and "
           f"--jobs 1 vs 8 ({time.time() - t0:.0f}s)")


# ---------------------------------------------------------------------------
# Criteria 5, 6, 8 share one desk-scale search run


@pytest.fixture(scope="module")
def search_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("search")
    data = make_planted_square_dataset(count=1200, size=32, square=8, seed=DATASET_SEED)
    data_path = root / "planted.dnds"
    imgpipe.write_dataset(data_path, data.dataset)
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(SEARCH_CONFIG))
    out = root / "run"
    t0 = time.time()
    code = main(["evolve", "--config", str(cfg_path), "--data", str(data_path),
                 "--out", str(out), "--jobs", str(jobs_available())])
    elapsed = time.time() - t0
    assert code == 0
    reports = {}
    for part in ("dev", "test"):
        rep = root / f"report_{part}"
        assert main(["eval", "--model", str(out / "best_model"), "--data",
                     str(data_path), "--split", part, "--out", str(rep)]) == 0
        for line in (rep / "report.csv").read_text().splitlines():
            if line.startswith("accuracy,"):
                reports[part] = float(line.split(",", 1)[1])
    history = []
    for line in (out / "history.csv").read_text().splitlines()[1:]:
        gen, best, mean = line.split(",")
        history.append((int(gen), float(best), float(mean)))
    return {"root": root, "out": out, "data_path": data_path, "dataset": data.dataset,
            "history": history, "dev_acc": reports["dev"], "test_acc": reports["test"],
            "elapsed": elapsed}


def test_criterion_5_desk_scale_search(search_run):
    best_fitness = search_run["history"][-1][1]
    dev, test = search_run["dev_acc"], search_run["test_acc"]
    assert best_fitness >= 0.90, f"best dev fitness {best_fitness}"
    assert abs(test - dev) <= 0.05, f"test {test} vs dev {dev}"
    record(f"CRITERION 5 PASS: best dev accuracy {best_fitness:.3f} >= 0.90, "
           f"bundle dev {dev:.3f} / test {test:.3f} within 5 points "
           f"({search_run['elapsed']:.0f}s wall on {jobs_available()} cores)")


def test_criterion_6_fitness_curve_shape(search_run):
    history = search_run["history"]
    gen0_mean = history[0][2]
    final_best = history[-1][1]
    assert gen0_mean < final_best, f"gen-0 mean {gen0_mean} vs final best {final_best}"
    for gen, best, mean in history:
        assert best >= mean - 1e-12, f"generation {gen}: best {best} < mean {mean}"
    curve = search_run["out"] / "fitness_curve.png"
    assert curve.exists() and curve.stat().st_size > 0
    record(f"CRITERION 6 PASS: gen-0 mean {gen0_mean:.3f} < final best {final_best:.3f}, "
           f"best >= mean in all {len(history)} generations, curve rendered")


def test_criterion_8_gradcam_localization(search_run):
    t0 = time.time()
    ds = search_run["dataset"]
    detector = chain_genome((32, 32, 1), [
        Conv(16, 5, 1, 2, GaussianFanAvg()),
        ReLU(),
        Pool(2, 2, MODE_MAX),
        Conv(16, 3, 1, 1, GaussianFanAvg()),
        ReLU(),
        Pool(2, 2, MODE_MAX),
    ])
    rng = np.random.Generator(np.random.PCG64(2718))
    net = compile_genome(detector, rng)
    train(net, ds.train_images, ds.train_labels, SolverConfig(), rng)
    acc = net_accuracy(net, ds.test_images, ds.test_labels)
    assert acc >= 0.95, f"detector only reached {acc}"

    probe_rng = np.random.Generator(np.random.PCG64(424242))
    localized = 0
    for _ in range(100):
        img, pos = planted_square_image(probe_rng, 32, 8, True, quadrant_pure=True)
        std = ((img - ds.mean) / ds.stddev).astype(np.float32)
        heat = gradcam(net, std, class_index=1)
        up = imgpipe.resize(heat.values, (32, 32))
        total = float(up.sum())
        if total <= 0:
            continue
        qy, qx = quadrant_of(pos, 8, 32)
        if float(up[qy * 16:(qy + 1) * 16, qx * 16:(qx + 1) * 16].sum()) / total >= 0.5:
            localized += 1
    assert localized >= 80, f"only {localized}/100 heatmaps localized"

    # zero classifier weights kill the class gradient entirely
    fc = [l for l in net.param_layers() if isinstance(l.kind, FullyConnected)][0]
    fc.state.weights[:] = 0.0
    fc.state.bias[:] = 0.0
    flat = gradcam(net, np.zeros((32, 32), dtype=np.float32), class_index=1)
    assert np.all(flat.values == 0.0)
    record(f"CRITERION 8 PASS: detector test accuracy {acc:.3f}, heatmap mass "
           f">=50% in planted quadrant for {localized}/100 positives, zero-weight "
           f"network gives all-zero heatmap ({time.time() - t0:.0f}s)")


# ---------------------------------------------------------------------------
# Criterion 7: preprocessing goldens

PIPELINE_GOLDEN = "164e51e7b5ed301b5d59b9dcbf14168a086bcaa2e5e82dfd5264f05be87c32c0"


def _pipeline_digest():
    rng = np.random.default_rng(2024)
    corpus = [chest_like_image(rng) for _ in range(10)]
    processed = np.stack([imgpipe.preprocess_image(img) for img in corpus])
    standardized, mean, std = imgpipe.standardize(processed)
    digest = hashlib.sha256()
    digest.update(standardized.tobytes())
    digest.update(np.float64([mean, std]).tobytes())
    return digest.hexdigest(), standardized


def test_criterion_7_preprocessing_goldens():
    t0 = time.time()
    first, standardized = _pipeline_digest()
    second, _ = _pipeline_digest()
    assert first == second, "pipeline is not run-to-run stable"
    assert first == PIPELINE_GOLDEN, f"pipeline hash drifted: {first}"
    as64 = standardized.astype(np.float64)
    assert abs(float(as64.mean())) < 1e-6
    assert abs(float(as64.std()) - 1.0) < 1e-6
    parts = imgpipe.split(list(range(1000)), seed=3)
    assert (len(parts.train), len(parts.dev), len(parts.test)) == (800, 100, 100)
    record(f"CRITERION 7 PASS: 10-image pipeline hash bit-stable ({first[:12]}...), "
           f"|mean| and |std-1| < 1e-6, 1000-item split exactly 800/100/100 "
           f"({time.time() - t0:.0f}s)")


# ---------------------------------------------------------------------------
# Criterion 9: serialization round trips


def test_criterion_9_serialization(tmp_path):
    t0 = time.time()
    # 1,000 fuzzed genome descriptors round-trip byte-identically
    rng = random.Random(31337)
    rates = MutationRates()
    g = minimal_genome((64, 64, 1), 2)
    for i in range(1000):
        g = mutate(g, rates, rng)
        text = serialize(g)
        back = deserialize(text)
        assert back == g
        assert serialize(back) == text
        if i % 25 == 24:
            g = minimal_genome((64, 64, 1), 2)

    # 1,000 fuzzed weight checkpoints round-trip byte-identically
    nrng = np.random.default_rng(7)
    path = tmp_path / "w.dndx"
    for i in range(1000):
        n_layers = int(nrng.integers(1, 4))
        entries = []
        for j in range(n_layers):
            if nrng.integers(0, 2):
                w = nrng.normal(size=(int(nrng.integers(1, 4)), int(nrng.integers(1, 3)),
                                      3, 3)).astype(np.float32)
                b = nrng.normal(size=(w.shape[0],)).astype(np.float32)
            else:
                w = nrng.normal(size=(int(nrng.integers(1, 20)),
                                      int(nrng.integers(1, 5)))).astype(np.float32)
                b = nrng.normal(size=(w.shape[1],)).astype(np.float32)
            entries.append((i * 10 + j, w, b))
        save_checkpoint(path, entries)
        first_bytes = path.read_bytes()
        loaded = load_checkpoint(path)
        save_checkpoint(path, [
            (gid, params[:entries[k][1].size].reshape(entries[k][1].shape),
             params[entries[k][1].size:])
            for k, (gid, params) in enumerate(loaded)])
        assert path.read_bytes() == first_bytes

    # the shipped reference descriptor validates and compiles
    with open(REFERENCE_DESCRIPTOR, encoding="utf-8") as fh:
        reference = deserialize(fh.read())
    net = compile_genome(reference, np.random.Generator(np.random.PCG64(0)))
    count = param_count(net)
    assert len(reference.genes) == 12
    assert 1_000_000 < count < 20_000_000
    record(f"CRITERION 9 PASS: 1000 genome + 1000 checkpoint round trips "
           f"byte-identical; reference descriptor validates and compiles "
           f"({count:,} parameters vs published 4.9M) ({time.time() - t0:.0f}s)")
