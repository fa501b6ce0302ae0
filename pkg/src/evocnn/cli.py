"""Command-line entry point.

Subcommands: preprocess (image directory -> dataset file), evolve (run the
architecture search), train (train one genome), eval (Table-style diagnostic
report of a model on a dataset split), gradcam (heatmap overlays for an
image). Every command is deterministic given its inputs and seed and records
a provenance file with the resolved configuration and artifact hashes.

Exit codes: 0 success, 1 runtime failure, 2 usage/configuration error.
"""

from __future__ import annotations

import os

# keep BLAS single-threaded: evaluation parallelism comes from worker
# processes, and thread-count changes must not perturb reductions
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import argparse  # noqa: E402
import dataclasses  # noqa: E402
import hashlib  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import multiprocessing  # noqa: E402
import sys  # noqa: E402

import numpy as np  # noqa: E402

from . import compile as compile_mod  # noqa: E402
from . import evalstats, gradcam as gradcam_mod, imgpipe, plots  # noqa: E402
from .evolution import EvolutionConfig, run_neat  # noqa: E402
from .genome import GenomeError, deserialize, serialize  # noqa: E402
from .mutation import HyperparameterRanges, MutationRates  # noqa: E402
from .nnet import SolverConfig  # noqa: E402

log = logging.getLogger(__name__)

SEED_ENV_VAR = "DNDX_SEED"


class UsageError(Exception):
    """Bad flags, bad config, or missing inputs; maps to exit code 2."""


# ---------------------------------------------------------------------------
# Run configuration


@dataclasses.dataclass(frozen=True)
class ImagePipeConfig:
    target_mean: float = imgpipe.DEFAULT_TARGET_MEAN
    band_low: float = imgpipe.DEFAULT_BAND_LOW
    band_high: float = imgpipe.DEFAULT_BAND_HIGH
    min_area_fraction: float = imgpipe.DEFAULT_MIN_AREA_FRACTION


@dataclasses.dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    evolution: EvolutionConfig = EvolutionConfig()
    solver: SolverConfig = SolverConfig()
    imgpipe: ImagePipeConfig = ImagePipeConfig()

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "evolution": {
                "population_size": self.evolution.population_size,
                "max_generations": self.evolution.max_generations,
                "target_fitness": self.evolution.target_fitness,
                "cull_fraction": self.evolution.cull_fraction,
                "staleness_limit": self.evolution.staleness_limit,
                "compatibility_threshold": self.evolution.compatibility_threshold,
            },
            "mutation_rates": dataclasses.asdict(self.evolution.rates),
            "ranges": {
                "conv_kernels": list(self.evolution.ranges.conv_kernels),
                "conv_strides": list(self.evolution.ranges.conv_strides),
                "conv_paddings": list(self.evolution.ranges.conv_paddings),
                "conv_filters": list(self.evolution.ranges.conv_filters),
                "pool_kernels": list(self.evolution.ranges.pool_kernels),
                "pool_strides": list(self.evolution.ranges.pool_strides),
                "fc_units": list(self.evolution.ranges.fc_units),
            },
            "solver": dataclasses.asdict(self.solver),
            "imgpipe": dataclasses.asdict(self.imgpipe),
        }


def _take_section(doc: dict, name: str) -> dict:
    section = doc.get(name, {})
    if not isinstance(section, dict):
        raise UsageError(f"config section {name!r} must be an object")
    return section


def _build(cls, section: dict, ctx: str, convert=None):
    known = {f.name for f in dataclasses.fields(cls)}
    extra = set(section) - known
    if extra:
        raise UsageError(f"unknown {ctx} config keys: {sorted(extra)}")
    values = dict(section)
    if convert:
        for key, fn in convert.items():
            if key in values:
                values[key] = fn(values[key])
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad {ctx} config: {e}") from e


def load_config(path: str | None) -> RunConfig:
    """Parse a JSON run configuration; omitted keys keep the shipped defaults
    (the reference search and solver regime)."""
    if path is None:
        return RunConfig()
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise UsageError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: config root must be an object")
    known = {"seed", "evolution", "mutation_rates", "ranges", "solver", "imgpipe"}
    extra = set(doc) - known
    if extra:
        raise UsageError(f"{path}: unknown config keys: {sorted(extra)}")

    rates = _build(MutationRates, _take_section(doc, "mutation_rates"), "mutation_rates")
    ranges = _build(HyperparameterRanges, _take_section(doc, "ranges"), "ranges",
                    convert={k: tuple for k in ("conv_kernels", "conv_strides",
                                                "conv_paddings", "conv_filters",
                                                "pool_kernels", "pool_strides",
                                                "fc_units")})
    evo_section = dict(_take_section(doc, "evolution"))
    evo_section["rates"] = rates
    evo_section["ranges"] = ranges
    evolution = _build(EvolutionConfig, evo_section, "evolution")
    solver = _build(SolverConfig, _take_section(doc, "solver"), "solver")
    pipe = _build(ImagePipeConfig, _take_section(doc, "imgpipe"), "imgpipe")
    seed = doc.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise UsageError(f"{path}: seed must be an integer")
    return RunConfig(seed=seed, evolution=evolution, solver=solver, imgpipe=pipe)


def resolve_seed(flag_value: int | None, cfg: RunConfig) -> int:
    """--seed flag wins, then the DNDX_SEED environment variable, then config."""
    if flag_value is not None:
        return flag_value
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        try:
            return int(env)
        except ValueError as e:
            raise UsageError(f"{SEED_ENV_VAR} must be an integer, got {env!r}") from e
    return cfg.seed


# ---------------------------------------------------------------------------
# Provenance


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_provenance(out_dir: str, command: str, cfg: RunConfig, seed: int,
                     artifacts: list[str], path: str | None = None) -> None:
    """run.json: resolved config, seed, and a sha256 per artifact. No timestamps,
    so identical runs produce identical bytes."""
    record = {
        "command": command,
        "seed": seed,
        "config": cfg.to_dict(),
        "artifacts": {
            os.path.relpath(a, out_dir): _sha256(a) for a in sorted(artifacts)
        },
    }
    target = path or os.path.join(out_dir, "run.json")
    with open(target, "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2)
        fh.write("\n")


def _require_file(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise UsageError(f"{what} not found: {path}")
    return path


def _walk_files(root: str) -> list[str]:
    found = []
    for base, _, names in os.walk(root):
        for name in names:
            found.append(os.path.join(base, name))
    return found


# ---------------------------------------------------------------------------
# preprocess


def cmd_preprocess(args) -> int:
    cfg = load_config(args.config)
    seed = resolve_seed(args.seed, cfg)
    _require_file(args.input, "input directory")
    _require_file(args.manifest, "manifest")
    pipe = cfg.imgpipe
    dataset = imgpipe.preprocess_directory(
        args.input, args.manifest, seed,
        target_mean=pipe.target_mean, band_low=pipe.band_low,
        band_high=pipe.band_high, min_area_fraction=pipe.min_area_fraction)
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    imgpipe.write_dataset(args.out, dataset)
    stats_path = os.path.join(out_dir, "stats.txt")
    imgpipe.write_stats(stats_path, dataset.mean, dataset.stddev)
    write_provenance(out_dir, "preprocess", cfg, seed,
                     [args.out, stats_path], path=args.out + ".run.json")
    n_train, n_dev, n_test = dataset.split_sizes()
    print(f"wrote {args.out}: {len(dataset.labels)} images "
          f"(train {n_train} / dev {n_dev} / test {n_test}), "
          f"mean {dataset.mean:.4f}, stddev {dataset.stddev:.4f}")
    return 0


# ---------------------------------------------------------------------------
# evolve

_worker_dataset = None
_worker_solver: SolverConfig | None = None


def _worker_init(data_path: str, solver: SolverConfig) -> None:
    global _worker_dataset, _worker_solver
    _worker_dataset = imgpipe.read_dataset(data_path)
    _worker_solver = solver


def _worker_eval(genome, seed: int) -> float:
    return compile_mod.evaluate_fitness(genome, _worker_dataset, _worker_solver, seed)


def _write_history(history, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("generation,best_fitness,mean_fitness\n")
        for row in history:
            fh.write(f"{row.generation},{row.best_fitness!r},{row.mean_fitness!r}\n")


def cmd_evolve(args) -> int:
    cfg = load_config(args.config)
    seed = resolve_seed(args.seed, cfg)
    _require_file(args.data, "dataset file")
    dataset = imgpipe.read_dataset(args.data)
    h, w = dataset.images.shape[1:]
    evo = dataclasses.replace(cfg.evolution, master_seed=seed,
                              input_shape=(h, w, 1), classes=2)
    os.makedirs(args.out, exist_ok=True)
    checkpoints_dir = os.path.join(args.out, "checkpoints")

    def checkpoint(pop, best):
        gen_dir = os.path.join(checkpoints_dir, f"gen_{pop.generation:03d}")
        os.makedirs(gen_dir, exist_ok=True)
        for i, member in enumerate(pop.members()):
            with open(os.path.join(gen_dir, f"genome_{i:03d}.json"), "w",
                      encoding="utf-8") as fh:
                fh.write(serialize(member))
        with open(os.path.join(gen_dir, "best.json"), "w", encoding="utf-8") as fh:
            fh.write(serialize(best))

    jobs = args.jobs if args.jobs is not None else (os.cpu_count() or 1)
    _worker_init(args.data, cfg.solver)  # parent needs the globals too
    if jobs > 1:
        with multiprocessing.Pool(jobs, initializer=_worker_init,
                                  initargs=(args.data, cfg.solver)) as pool:
            result = run_neat(
                evo, _worker_eval,
                map_fn=lambda fn, pairs: pool.starmap(fn, pairs, chunksize=1),
                on_generation=checkpoint)
    else:
        result = run_neat(evo, _worker_eval, on_generation=checkpoint)

    history_path = os.path.join(args.out, "history.csv")
    _write_history(result.history, history_path)
    curve_path = os.path.join(args.out, "fitness_curve.png")
    plots.save_fitness_curve(result.history, curve_path)

    # rebuild the best genome's trained weights from its evaluation seed
    rng = np.random.Generator(np.random.PCG64(result.best_eval_seed))
    net = compile_mod.compile_genome(result.best, rng)
    compile_mod.train(net, dataset.train_images, dataset.train_labels, cfg.solver, rng)
    bundle_dir = os.path.join(args.out, "best_model")
    compile_mod.export_bundle(bundle_dir, net,
                              extra={"mean": dataset.mean, "stddev": dataset.stddev,
                                     "train_seed": result.best_eval_seed})

    artifacts = [history_path, curve_path] + _walk_files(bundle_dir) + _walk_files(checkpoints_dir)
    write_provenance(args.out, "evolve", cfg, seed, artifacts)
    print(f"best fitness {result.best.fitness!r} with {len(result.best.genes)} genes "
          f"after {len(result.history)} generations; bundle at {bundle_dir}")
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    seed = resolve_seed(args.seed, cfg)
    _require_file(args.genome, "genome descriptor")
    _require_file(args.data, "dataset file")
    with open(args.genome, encoding="utf-8") as fh:
        try:
            genome = deserialize(fh.read())
        except GenomeError as e:
            raise UsageError(f"{args.genome}: {e}") from e
    dataset = imgpipe.read_dataset(args.data)
    rng = np.random.Generator(np.random.PCG64(seed))
    net = compile_mod.compile_genome(genome, rng)
    _, final_loss = compile_mod.train(net, dataset.train_images, dataset.train_labels,
                                      cfg.solver, rng)
    dev_acc = compile_mod.accuracy(net, dataset.dev_images, dataset.dev_labels)
    os.makedirs(args.out, exist_ok=True)
    compile_mod.export_bundle(args.out, net,
                              extra={"mean": dataset.mean, "stddev": dataset.stddev,
                                     "train_seed": seed})
    write_provenance(args.out, "train", cfg, seed,
                     [os.path.join(args.out, name) for name in
                      (compile_mod.BUNDLE_GENOME, compile_mod.BUNDLE_WEIGHTS,
                       compile_mod.BUNDLE_MANIFEST)])
    print(f"trained {len(genome.genes)}-gene network: final loss {final_loss:.4f}, "
          f"dev accuracy {dev_acc:.4f}; bundle at {args.out}")
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    _require_file(args.model, "model bundle")
    _require_file(args.data, "dataset file")
    net, _ = compile_mod.load_bundle(args.model)
    dataset = imgpipe.read_dataset(args.data)
    images, labels = dataset.part(args.split)
    if images.shape[0] == 0:
        raise UsageError(f"split {args.split!r} of {args.data} is empty")
    predicted = compile_mod.predict(net, images)
    table = evalstats.tabulate(zip(predicted.tolist(), labels.tolist()))
    diag = evalstats.stats(table)
    text = evalstats.to_text(table, diag)
    print(text, end="")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        csv_path = os.path.join(args.out, "report.csv")
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write(evalstats.to_csv(table, diag))
        text_path = os.path.join(args.out, "report.txt")
        with open(text_path, "w", encoding="utf-8") as fh:
            fh.write(text)
        figure_path = os.path.join(args.out, "confusion_matrix.png")
        plots.save_confusion_matrix(table, diag, figure_path)
        write_provenance(args.out, "eval", cfg, 0, [csv_path, text_path, figure_path])
    return 0


# ---------------------------------------------------------------------------
# gradcam


def cmd_gradcam(args) -> int:
    cfg = load_config(args.config)
    _require_file(args.model, "model bundle")
    _require_file(args.image, "image file")
    net, manifest = compile_mod.load_bundle(args.model)
    img8 = imgpipe.load_gray_image(args.image)
    h, w, _ = net.input_shape
    resized = imgpipe.resize(img8, (h, w))
    mean = manifest.get("mean", 0.0)
    stddev = manifest.get("stddev", 1.0)
    standardized = ((resized - mean) / stddev).astype(np.float32)

    try:
        heat = gradcam_mod.gradcam(net, standardized, layer=args.layer,
                                   class_index=args.class_index)
    except (gradcam_mod.LayerNotConvolutional, ValueError) as e:
        raise UsageError(str(e)) from e

    os.makedirs(args.out, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.image))[0]
    overlay_img = gradcam_mod.overlay(heat, np.round(resized).astype(np.uint8))
    png_path = os.path.join(args.out, f"{stem}.heat.png")
    from PIL import Image

    Image.fromarray(overlay_img, mode="RGB").save(png_path)
    pgm_path = os.path.join(args.out, f"{stem}.heat.pgm")
    gradcam_mod.write_pgm(pgm_path, gradcam_mod.heatmap_to_u8(heat))
    write_provenance(args.out, "gradcam", cfg, 0, [png_path, pgm_path])
    print(f"wrote {png_path} and {pgm_path}")
    return 0


# ---------------------------------------------------------------------------
# Parser and entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evocnn",
        description="Evolve CNN architectures, train them, and inspect the results.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="preprocess an image directory into a dataset file")
    p.add_argument("--input", required=True, help="directory of PNG/PGM grayscale images")
    p.add_argument("--manifest", required=True, help="CSV with filename,label rows")
    p.add_argument("--out", required=True, help="output dataset file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_preprocess)

    p = sub.add_parser("evolve", help="run the architecture search on a dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True, help="dataset file from preprocess")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--jobs", type=int, default=None,
                   help="parallel fitness evaluations (default: logical cores)")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_evolve)

    p = sub.add_parser("train", help="train a genome descriptor into a model bundle")
    p.add_argument("--genome", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="diagnostic report of a model on a dataset split")
    p.add_argument("--model", required=True, help="model bundle directory")
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("dev", "test"), required=True)
    p.add_argument("--out", default=None, help="directory for report files")
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcam", help="class-activation heatmap overlays for an image")
    p.add_argument("--model", required=True, help="model bundle directory")
    p.add_argument("--image", required=True)
    p.add_argument("--layer", type=int, default=None, help="target convolution gene id")
    p.add_argument("--class", dest="class_index", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_gradcam)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (imgpipe.ManifestError, GenomeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure
        log.exception("command failed")
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
